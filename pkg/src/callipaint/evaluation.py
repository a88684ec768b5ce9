"""Objective evaluation: a two-headed glyph classifier, random-mask
inpainting accuracy reports, and the inpainted-vs-generated comparison.

The classifier is retrained on the corpus at hand; its absolute numbers are
not comparable to any published figures and reports say so.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import GlyphImage, LoadedDataset, Mask, MaskSpec, _mask_from_rng
from .diffusion import NoiseSchedule, sample_batch
from .denoiser import DenoiserParams
from .repaint import InpaintConfig, inpaint_batch
from .rng import child_seed, stream
from .tensorio import CheckpointFormatError, read_tensor_file, write_tensor_file

__all__ = [
    "Classifier",
    "ClassifierConfig",
    "EvalMaskSpec",
    "EvalReport",
    "ScriptRow",
    "MissingCoverageError",
    "train_classifier",
    "classify",
    "eval_inpainting",
    "compare_inpaint_vs_generate",
    "save_classifier",
    "load_classifier",
]

# Published reference accuracies for the system this package re-implements at
# desk scale; shown in report footers for context, never asserted by tests.
REFERENCE_TOTALS = {"script": 0.98, "character": 0.95}
REFERENCE_GENERATED_CHARACTER = 0.85


class MissingCoverageError(ValueError):
    """Training split lacks at least one script or character class."""


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 150
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    hidden: int = 160
    channels: tuple[int, int] = (32, 64)
    dropout: float = 0.2
    max_shift: int = 3  # training-time translation jitter in pixels


def _normalized_view(img_model: np.ndarray, ink_threshold: int = 192) -> np.ndarray:
    """Crop the ink box and stretch it to fill the canvas.

    Gives the character head a size- and position-invariant view, so glyph
    identity transfers across fonts whose natural metrics differ. Blank
    images come back blank.
    """
    from PIL import Image

    from .corpus import to_model_range, to_unit8_range

    u8 = to_unit8_range(img_model)
    ink = np.where(u8 < ink_threshold)
    if ink[0].size == 0:
        return np.full_like(np.asarray(img_model, dtype=np.float32), 1.0)
    y0, y1 = int(ink[0].min()), int(ink[0].max()) + 1
    x0, x1 = int(ink[1].min()), int(ink[1].max()) + 1
    h, w = u8.shape
    crop = Image.fromarray(u8[y0:y1, x0:x1], mode="L").resize((w - 4, h - 4), Image.LANCZOS)
    out = Image.new("L", (w, h), 255)
    out.paste(crop, (2, 2))
    return to_model_range(np.asarray(out))


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.full_like(img, 1.0)
    h, w = img.shape
    out[max(0, dy) : min(h, h + dy), max(0, dx) : min(w, w + dx)] = img[
        max(0, -dy) : min(h, h - dy), max(0, -dx) : min(w, w - dx)
    ]
    return out


class _ClassifierNet(nn.Module):
    """Two shared conv blocks and two heads.

    The script head reads pooled per-channel statistics of the raw view
    (stroke weight, serif energy); the character head reads spatial features
    of the normalized view, with the raw view as a second route whose logits
    are added at inference.
    """

    def __init__(self, resolution, n_script: int, n_character: int, cfg: ClassifierConfig):
        super().__init__()
        c1, c2 = cfg.channels
        h, w = resolution
        self.conv1 = nn.Conv2d(1, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.drop = nn.Dropout(cfg.dropout)
        self.head_script = nn.Linear(2 * (c1 + c2), n_script)
        self.trunk = nn.Linear(c2 * (h // 4) * (w // 4), cfg.hidden)
        self.head_character = nn.Linear(cfg.hidden, n_character)

    def _features(self, x):
        h1 = torch.nn.functional.silu(self.conv1(x))
        h2 = torch.nn.functional.silu(self.conv2(self.pool(h1)))
        return h1, h2

    def _character_logits(self, h2):
        flat = self.drop(self.pool(h2).flatten(1))
        return self.head_character(torch.nn.functional.silu(self.trunk(flat)))

    def forward(self, x_raw, x_norm):
        h1, h2 = self._features(x_raw)
        stats = torch.cat(
            [h1.mean(dim=(2, 3)), h1.amax(dim=(2, 3)),
             h2.mean(dim=(2, 3)), h2.amax(dim=(2, 3))],
            dim=1,
        )
        _, hn2 = self._features(x_norm)
        return self.head_script(stats), self._character_logits(hn2), self._character_logits(h2)


@dataclass
class Classifier:
    module: _ClassifierNet
    vocab_character: list[str]
    vocab_script: list[str]
    vocab_style: list[str]
    resolution: tuple[int, int]
    config: ClassifierConfig
    val_script_accuracy: float | None = None
    val_character_accuracy: float | None = None

    def logits(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(script logits, character logits) for a [B, H, W] batch; character
        logits are summed over the normalized and raw views."""
        images = np.ascontiguousarray(images, dtype=np.float32)
        norm = np.stack([_normalized_view(im) for im in images]).astype(np.float32)
        self.module.eval()
        with torch.no_grad():
            s, cn, cr = self.module(
                torch.from_numpy(images).unsqueeze(1), torch.from_numpy(norm).unsqueeze(1)
            )
        return s.numpy(), (cn + cr).numpy()


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_classifier(
    train_ds: LoadedDataset,
    val_ds: LoadedDataset | None,
    config: ClassifierConfig = ClassifierConfig(),
) -> Classifier:
    """Cross-entropy training of both heads; deterministic per seed.

    Each minibatch applies a seeded integer translation jitter to both views;
    the character loss is taken on both the normalized and raw views.
    """
    n_char, n_script, _ = train_ds.vocab_sizes
    for axis, n, col in (("script", n_script, 1), ("character", n_char, 0)):
        present = set(int(v) for v in train_ds.labels[:, col])
        missing = sorted(set(range(n)) - present)
        if missing:
            raise MissingCoverageError(f"train split has no examples of {axis} ids {missing}")

    net = _ClassifierNet(train_ds.resolution, n_script, n_char, config)
    gen = torch.Generator().manual_seed(child_seed(config.seed, "clf_init"))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(m.weight[0].numel())
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()

    torch.manual_seed(child_seed(config.seed, "dropout"))
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    norm_images = np.stack([_normalized_view(im) for im in train_ds.images]).astype(np.float32)
    y_char_all = train_ds.labels[:, 0]
    y_script_all = train_ds.labels[:, 1]
    n = len(train_ds)
    net.train()
    for epoch in range(config.epochs):
        rng = stream(config.seed, "epoch", epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            shifts = rng.integers(-config.max_shift, config.max_shift + 1, size=(len(idx), 2))
            raw = np.stack(
                [_shift(train_ds.images[i], int(dy), int(dx)) for i, (dy, dx) in zip(idx, shifts)]
            )
            normed = np.stack(
                [_shift(norm_images[i], int(dy), int(dx)) for i, (dy, dx) in zip(idx, shifts)]
            )
            y_script = torch.from_numpy(y_script_all[idx])
            y_char = torch.from_numpy(y_char_all[idx])
            opt.zero_grad(set_to_none=True)
            ls, lcn, lcr = net(
                torch.from_numpy(raw).unsqueeze(1), torch.from_numpy(normed).unsqueeze(1)
            )
            loss = (
                torch.nn.functional.cross_entropy(ls, y_script)
                + torch.nn.functional.cross_entropy(lcn, y_char)
                + torch.nn.functional.cross_entropy(lcr, y_char)
            )
            loss.backward()
            opt.step()
    net.eval()

    clf = Classifier(
        module=net,
        vocab_character=list(train_ds.vocab_character),
        vocab_script=list(train_ds.vocab_script),
        vocab_style=list(train_ds.vocab_style),
        resolution=train_ds.resolution,
        config=config,
    )
    if val_ds is not None and len(val_ds):
        s_logits, c_logits = clf.logits(val_ds.images)
        clf.val_script_accuracy = float(
            (s_logits.argmax(axis=1) == val_ds.labels[:, 1]).mean()
        )
        clf.val_character_accuracy = float(
            (c_logits.argmax(axis=1) == val_ds.labels[:, 0]).mean()
        )
    return clf


def classify(clf: Classifier, image: GlyphImage | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(script distribution, character distribution) for one image."""
    px = image.to_model().pixels if isinstance(image, GlyphImage) else np.asarray(image)
    if px.shape != tuple(clf.resolution):
        raise ValueError(f"image shape {px.shape} != classifier resolution {clf.resolution}")
    s_logits, c_logits = clf.logits(px[None].astype(np.float32))
    return _softmax(s_logits[0]), _softmax(c_logits[0])


# ---------------------------------------------------------------------------
# Classifier checkpoints
# ---------------------------------------------------------------------------


def save_classifier(clf: Classifier, path: str | Path) -> None:
    metadata = {
        "kind": "classifier",
        "resolution": list(clf.resolution),
        "config": {
            "epochs": clf.config.epochs,
            "lr": clf.config.lr,
            "batch": clf.config.batch,
            "seed": clf.config.seed,
            "hidden": clf.config.hidden,
            "channels": list(clf.config.channels),
            "dropout": clf.config.dropout,
            "max_shift": clf.config.max_shift,
        },
        "vocabularies": {
            "character": clf.vocab_character,
            "script": clf.vocab_script,
            "style": clf.vocab_style,
        },
        "val_script_accuracy": clf.val_script_accuracy,
        "val_character_accuracy": clf.val_character_accuracy,
    }
    tensors = {
        name: p.detach().numpy().copy() for name, p in clf.module.state_dict().items()
    }
    write_tensor_file(path, metadata, tensors)


def load_classifier(path: str | Path) -> Classifier:
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "classifier":
        raise CheckpointFormatError(f"{path} is not a classifier checkpoint")
    cfg_d = metadata["config"]
    config = ClassifierConfig(
        epochs=cfg_d["epochs"],
        lr=cfg_d["lr"],
        batch=cfg_d["batch"],
        seed=cfg_d["seed"],
        hidden=cfg_d["hidden"],
        channels=tuple(cfg_d["channels"]),
        dropout=cfg_d["dropout"],
        max_shift=cfg_d["max_shift"],
    )
    vocab = metadata["vocabularies"]
    net = _ClassifierNet(
        tuple(metadata["resolution"]), len(vocab["script"]), len(vocab["character"]), config
    )
    state = net.state_dict()
    if set(state.keys()) != set(tensors.keys()):
        raise CheckpointFormatError("classifier tensors disagree with embedded config")
    for name, arr in tensors.items():
        state[name] = torch.from_numpy(arr)
    net.load_state_dict(state)
    return Classifier(
        module=net,
        vocab_character=list(vocab["character"]),
        vocab_script=list(vocab["script"]),
        vocab_style=list(vocab["style"]),
        resolution=tuple(metadata["resolution"]),
        config=config,
        val_script_accuracy=metadata.get("val_script_accuracy"),
        val_character_accuracy=metadata.get("val_character_accuracy"),
    )


# ---------------------------------------------------------------------------
# Inpainting evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalMaskSpec:
    """Per-item mask draw: rectangle count uniform in [n_rects_min, n_rects_max],
    side fractions uniform in [min_frac, max_frac]."""

    n_rects_min: int = 1
    n_rects_max: int = 3
    min_frac: float = 0.25
    max_frac: float = 0.5

    def validate(self) -> None:
        if not 0 <= self.n_rects_min <= self.n_rects_max:
            raise ValueError("need 0 <= n_rects_min <= n_rects_max")
        MaskSpec(self.n_rects_max, self.min_frac, self.max_frac).validate()

    @property
    def is_empty(self) -> bool:
        return self.n_rects_max == 0

    def draw(self, rng: np.random.Generator, resolution: tuple[int, int]) -> Mask:
        k = int(rng.integers(self.n_rects_min, self.n_rects_max + 1))
        return _mask_from_rng(rng, MaskSpec(k, self.min_frac, self.max_frac), resolution)

    def to_dict(self) -> dict:
        return {
            "n_rects_min": self.n_rects_min,
            "n_rects_max": self.n_rects_max,
            "min_frac": self.min_frac,
            "max_frac": self.max_frac,
        }


@dataclass(frozen=True)
class ScriptRow:
    n: int
    script_accuracy: float
    character_accuracy: float


@dataclass
class EvalReport:
    rows: dict[str, ScriptRow]
    total: ScriptRow
    mask_spec: dict
    n_per_cell: int
    seed: int
    model_id: str = ""
    classifier_id: str = ""
    weighting: str = "sample-weighted"

    def validate(self) -> None:
        for name, row in {**self.rows, "Total": self.total}.items():
            if not (0.0 <= row.script_accuracy <= 1.0 and 0.0 <= row.character_accuracy <= 1.0):
                raise ValueError(f"accuracy out of [0,1] in row {name}")
        n_total = sum(r.n for r in self.rows.values())
        if n_total != self.total.n:
            raise ValueError("total row count disagrees with per-script rows")
        if n_total:
            ws = sum(r.n * r.script_accuracy for r in self.rows.values()) / n_total
            wc = sum(r.n * r.character_accuracy for r in self.rows.values()) / n_total
            if abs(ws - self.total.script_accuracy) > 1e-9 or abs(
                wc - self.total.character_accuracy
            ) > 1e-9:
                raise ValueError("total row is not the sample-weighted mean of script rows")

    def to_json_dict(self) -> dict:
        return {
            "rows": {
                name: {
                    "n": row.n,
                    "script_accuracy": row.script_accuracy,
                    "character_accuracy": row.character_accuracy,
                }
                for name, row in self.rows.items()
            },
            "total": {
                "n": self.total.n,
                "script_accuracy": self.total.script_accuracy,
                "character_accuracy": self.total.character_accuracy,
            },
            "mask_spec": self.mask_spec,
            "n_per_cell": self.n_per_cell,
            "seed": self.seed,
            "model_id": self.model_id,
            "classifier_id": self.classifier_id,
            "weighting": self.weighting,
            "reference_totals": REFERENCE_TOTALS,
        }

    def render_text(self) -> str:
        name_w = max([len(n) for n in self.rows] + [len("Total"), 6])
        lines = [
            f"{'':<{name_w}}  {'n':>5}  {'Script':>8}  {'Character':>10}",
            "-" * (name_w + 29),
        ]
        for name in sorted(self.rows):
            row = self.rows[name]
            lines.append(
                f"{name:<{name_w}}  {row.n:>5}  {row.script_accuracy:>8.3f}  "
                f"{row.character_accuracy:>10.3f}"
            )
        lines.append("-" * (name_w + 29))
        lines.append(
            f"{'Total':<{name_w}}  {self.total.n:>5}  {self.total.script_accuracy:>8.3f}  "
            f"{self.total.character_accuracy:>10.3f}"
        )
        lines.append("")
        lines.append(
            "reference (published CalliPaint totals, not comparable at desk scale): "
            f"script {REFERENCE_TOTALS['script']:.2f} / character {REFERENCE_TOTALS['character']:.2f}"
        )
        return "\n".join(lines)


def _rows_from_counts(counts: dict[str, list[int]]) -> tuple[dict[str, ScriptRow], ScriptRow]:
    rows = {}
    n_all = s_all = c_all = 0
    for script, (n, s_ok, c_ok) in counts.items():
        rows[script] = ScriptRow(
            n=n,
            script_accuracy=s_ok / n if n else 0.0,
            character_accuracy=c_ok / n if n else 0.0,
        )
        n_all += n
        s_all += s_ok
        c_all += c_ok
    total = ScriptRow(
        n=n_all,
        script_accuracy=s_all / n_all if n_all else 0.0,
        character_accuracy=c_all / n_all if n_all else 0.0,
    )
    return rows, total


_EVAL_BATCH = 32


def _classifier_matches_dataset(clf: Classifier, ds: LoadedDataset) -> bool:
    return (
        clf.vocab_character == ds.vocab_character
        and clf.vocab_script == ds.vocab_script
        and clf.vocab_style == ds.vocab_style
    )


def eval_inpainting(
    gen_params: DenoiserParams,
    clf: Classifier,
    dataset_val: LoadedDataset,
    mask_spec: EvalMaskSpec,
    n_per_cell: int,
    seed: int,
    schedule: NoiseSchedule,
    inpaint_config: InpaintConfig | None = None,
) -> EvalReport:
    """Inpaint gold val images under random masks with their true labels,
    classify the results, and aggregate per script."""
    mask_spec.validate()
    if not _classifier_matches_dataset(clf, dataset_val):
        raise ValueError("classifier vocabularies do not match the dataset")
    if gen_params.config.vocab_sizes != dataset_val.vocab_sizes:
        raise ValueError("generator vocabularies do not match the dataset")
    if len(dataset_val) == 0:
        raise ValueError("empty val dataset")
    if inpaint_config is None:
        inpaint_config = InpaintConfig()

    # per-script item selection, cycling deterministically if the cell is small
    items: list[int] = []
    for sid in range(len(dataset_val.vocab_script)):
        pool = [i for i in range(len(dataset_val)) if dataset_val.labels[i, 1] == sid]
        if not pool:
            continue
        pick = stream(seed, "pick", sid)
        items.extend(int(pool[int(j)]) for j in pick.integers(0, len(pool), size=n_per_cell))

    counts = {name: [0, 0, 0] for name in dataset_val.vocab_script}
    for start in range(0, len(items), _EVAL_BATCH):
        chunk = items[start : start + _EVAL_BATCH]
        golds = [GlyphImage(dataset_val.images[i], "model") for i in chunk]
        conds = [dataset_val.label_at(i) for i in chunk]
        masks = [
            mask_spec.draw(stream(seed, "mask", start + j), dataset_val.resolution)
            for j in range(len(chunk))
        ]
        seeds = [child_seed(seed, "inpaint", start + j) for j in range(len(chunk))]
        outs, _ = inpaint_batch(gen_params, golds, masks, conds, schedule, seeds, inpaint_config)
        s_logits, c_logits = clf.logits(np.stack([o.pixels for o in outs]))
        s_pred, c_pred = s_logits.argmax(axis=1), c_logits.argmax(axis=1)
        for j, i in enumerate(chunk):
            script_name = dataset_val.vocab_script[int(dataset_val.labels[i, 1])]
            counts[script_name][0] += 1
            counts[script_name][1] += int(s_pred[j] == dataset_val.labels[i, 1])
            counts[script_name][2] += int(c_pred[j] == dataset_val.labels[i, 0])

    rows, total = _rows_from_counts({k: tuple(v) for k, v in counts.items()})
    report = EvalReport(
        rows=rows,
        total=total,
        mask_spec=mask_spec.to_dict(),
        n_per_cell=n_per_cell,
        seed=seed,
    )
    report.validate()
    return report


def compare_inpaint_vs_generate(
    gen_params: DenoiserParams,
    clf: Classifier,
    dataset_val: LoadedDataset,
    mask_spec: EvalMaskSpec,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    inpaint_config: InpaintConfig | None = None,
) -> dict:
    """Character accuracy of masked inpainting of gold images versus full
    generation under the same conditions."""
    mask_spec.validate()
    if not _classifier_matches_dataset(clf, dataset_val):
        raise ValueError("classifier vocabularies do not match the dataset")
    if gen_params.config.vocab_sizes != dataset_val.vocab_sizes:
        raise ValueError("generator vocabularies do not match the dataset")
    if inpaint_config is None:
        inpaint_config = InpaintConfig()

    pick = stream(seed, "items")
    items = [int(i) for i in pick.integers(0, len(dataset_val), size=n)]

    correct_inpaint = 0
    correct_generate = 0
    for start in range(0, n, _EVAL_BATCH):
        chunk = items[start : start + _EVAL_BATCH]
        golds = [GlyphImage(dataset_val.images[i], "model") for i in chunk]
        conds = [dataset_val.label_at(i) for i in chunk]
        true_chars = np.array([dataset_val.labels[i, 0] for i in chunk])
        masks = [
            mask_spec.draw(stream(seed, "mask", start + j), dataset_val.resolution)
            for j in range(len(chunk))
        ]
        in_seeds = [child_seed(seed, "inpaint", start + j) for j in range(len(chunk))]
        inpainted, _ = inpaint_batch(
            gen_params, golds, masks, conds, schedule, in_seeds, inpaint_config
        )
        gen_seeds = [child_seed(seed, "generate", start + j) for j in range(len(chunk))]
        generated, _ = sample_batch(gen_params, conds, schedule, gen_seeds)

        _, c_in = clf.logits(np.stack([o.pixels for o in inpainted]))
        _, c_gen = clf.logits(np.stack([o.pixels for o in generated]))
        correct_inpaint += int((c_in.argmax(axis=1) == true_chars).sum())
        correct_generate += int((c_gen.argmax(axis=1) == true_chars).sum())

    acc_inpaint = correct_inpaint / n
    acc_generate = correct_generate / n
    return {
        "acc_inpaint": acc_inpaint,
        "acc_generate": acc_generate,
        "delta": acc_inpaint - acc_generate,
        "n": n,
        "reference": {
            "acc_inpaint": REFERENCE_TOTALS["character"],
            "acc_generate": REFERENCE_GENERATED_CHARACTER,
            "delta": REFERENCE_TOTALS["character"] - REFERENCE_GENERATED_CHARACTER,
        },
    }
