"""Shared fixtures.

Fast tests run on a 16x16 corpus and a small network trained for a few
hundred steps. The desk-scale fixtures (32x32, 20k steps) power the slow
acceptance checks; set CALLIPAINT_TEST_CACHE to a directory to reuse the
trained checkpoints across pytest sessions.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import pytest

from callipaint import corpus, denoiser, diffusion, evaluation

DEJAVU_DIR = Path("/usr/share/fonts/truetype/dejavu")
FONT_SANS = str(DEJAVU_DIR / "DejaVuSans.ttf")
FONT_SERIF = str(DEJAVU_DIR / "DejaVuSerif.ttf")
FONT_SANS_BOLD = str(DEJAVU_DIR / "DejaVuSans-Bold.ttf")
FONT_SERIF_BOLD = str(DEJAVU_DIR / "DejaVuSerif-Bold.ttf")

TINY_CHARS = "ABCDEF"
DESK_CHARS = "ABCDEFGHJKLMNPQRSTUV"  # 20 characters

DESK_TRAIN_STEPS = 20_000
DESK_SEED = 11


def desk_sources():
    return [
        corpus.FontSource(FONT_SANS, "regular", "sans"),
        corpus.FontSource(FONT_SERIF, "clerical", "serif"),
        corpus.FontSource(FONT_SANS_BOLD, "cursive", "sansbold"),
        corpus.FontSource(FONT_SERIF_BOLD, "seal", "serifbold"),
    ]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifest = corpus.build_manifest(
        characters=list(TINY_CHARS),
        sources=[
            corpus.FontSource(FONT_SANS, "regular", "sans"),
            corpus.FontSource(FONT_SERIF, "clerical", "serif"),
        ],
        out_dir=out,
        val_fraction=0.25,
        seed=3,
        resolution=(16, 16),
    )
    return manifest


@pytest.fixture(scope="session")
def tiny_train(tiny_corpus):
    return corpus.load_dataset(tiny_corpus, "train")


@pytest.fixture(scope="session")
def tiny_val(tiny_corpus):
    return corpus.load_dataset(tiny_corpus, "val")


@pytest.fixture(scope="session")
def tiny_config(tiny_train):
    return denoiser.DenoiserConfig(
        resolution=(16, 16),
        base_channels=8,
        channel_multipliers=(1, 2),
        time_embed_dim=32,
        vocab_character=len(tiny_train.vocab_character),
        vocab_script=len(tiny_train.vocab_script),
        vocab_style=len(tiny_train.vocab_style),
        groups=4,
    )


@pytest.fixture(scope="session")
def tiny_schedule():
    return diffusion.make_schedule(10, 1e-3, 0.08)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return denoiser.init_params(tiny_config, seed=5)


@pytest.fixture(scope="session")
def tiny_trained(tiny_params, tiny_train, tiny_schedule):
    ckpt = denoiser.train(
        tiny_params,
        tiny_train,
        tiny_schedule,
        denoiser.TrainConfig(lr=1e-3, batch=8, steps=300, seed=7),
    )
    return ckpt


# ---------------------------------------------------------------------------
# Desk-scale fixtures (slow tier)
# ---------------------------------------------------------------------------


def _cache_dir():
    root = os.environ.get("CALLIPAINT_TEST_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cache_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


DESK_RECIPE = {
    "chars": DESK_CHARS,
    "fonts": ["sans", "serif", "sansbold", "serifbold"],
    "resolution": 32,
    "val_fraction": 0.2,
    "corpus_seed": 6,
    "config": {"base": 16, "mult": [1, 2, 4], "temb": 64, "groups": 8},
    "schedule": [diffusion.DEFAULT_T, diffusion.DEFAULT_BETA_START, diffusion.DEFAULT_BETA_END],
    "train": {"lr": 1e-3, "batch": 8, "steps": DESK_TRAIN_STEPS, "seed": DESK_SEED},
    "classifier": {"epochs": 150, "lr": 1e-3, "seed": 13},
}


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_corpus")
    return corpus.build_manifest(
        characters=list(DESK_CHARS),
        sources=desk_sources(),
        out_dir=out,
        val_fraction=DESK_RECIPE["val_fraction"],
        seed=DESK_RECIPE["corpus_seed"],
        resolution=(32, 32),
    )


@pytest.fixture(scope="session")
def desk_schedule():
    return diffusion.make_schedule(*DESK_RECIPE["schedule"])


@pytest.fixture(scope="session")
def desk_checkpoint(desk_corpus, desk_schedule):
    """The 20k-step trained generator; cached on disk when enabled."""
    cache = _cache_dir()
    key = _cache_key({k: DESK_RECIPE[k] for k in ("chars", "fonts", "resolution",
                                                  "val_fraction", "corpus_seed",
                                                  "config", "schedule", "train")})
    if cache is not None:
        path = cache / f"desk_gen_{key}.cpkt"
        if path.exists():
            return denoiser.load_checkpoint(path)
    train_ds = corpus.load_dataset(desk_corpus, "train")
    cfg = denoiser.DenoiserConfig(
        resolution=(32, 32),
        base_channels=DESK_RECIPE["config"]["base"],
        channel_multipliers=tuple(DESK_RECIPE["config"]["mult"]),
        time_embed_dim=DESK_RECIPE["config"]["temb"],
        vocab_character=len(train_ds.vocab_character),
        vocab_script=len(train_ds.vocab_script),
        vocab_style=len(train_ds.vocab_style),
        groups=DESK_RECIPE["config"]["groups"],
    )
    params = denoiser.init_params(cfg, seed=DESK_SEED)
    tc = DESK_RECIPE["train"]
    ckpt = denoiser.train(
        params,
        train_ds,
        desk_schedule,
        denoiser.TrainConfig(lr=tc["lr"], batch=tc["batch"], steps=tc["steps"], seed=tc["seed"]),
    )
    if cache is not None:
        denoiser.save_checkpoint(ckpt, cache / f"desk_gen_{key}.cpkt")
    return ckpt


@pytest.fixture(scope="session")
def desk_classifier(desk_corpus):
    cache = _cache_dir()
    key = _cache_key({k: DESK_RECIPE[k] for k in ("chars", "fonts", "resolution",
                                                  "val_fraction", "corpus_seed",
                                                  "classifier")})
    if cache is not None:
        path = cache / f"desk_clf_{key}.cpkt"
        if path.exists():
            return evaluation.load_classifier(path)
    train_ds = corpus.load_dataset(desk_corpus, "train")
    val_ds = corpus.load_dataset(desk_corpus, "val")
    cc = DESK_RECIPE["classifier"]
    clf = evaluation.train_classifier(
        train_ds,
        val_ds,
        evaluation.ClassifierConfig(epochs=cc["epochs"], lr=cc["lr"], seed=cc["seed"]),
    )
    if cache is not None:
        evaluation.save_classifier(clf, cache / f"desk_clf_{key}.cpkt")
    return clf
