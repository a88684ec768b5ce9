import numpy as np
import pytest
import torch

from callipaint import denoiser, diffusion
from callipaint.corpus import ConditionLabel
from callipaint.denoiser import (
    Checkpoint,
    DenoiserConfig,
    TrainConfig,
    init_params,
    embed_condition,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from callipaint.rng import stream
from callipaint.tensorio import CheckpointFormatError

# Pinned once from the analytic layer-shape formula below for the default
# 32x32 config; guards against silent architecture drift.
DEFAULT_PARAM_COUNT = 1_477_569


def probe_config():
    """8x8 config small enough for finite-difference checking (< 2e3 params)."""
    return DenoiserConfig(
        resolution=(8, 8),
        base_channels=2,
        channel_multipliers=(1, 2),
        time_embed_dim=4,
        vocab_character=3,
        vocab_script=2,
        vocab_style=2,
        groups=1,
    )


def analytic_param_count(cfg: DenoiserConfig) -> int:
    """Parameter count re-derived from layer shapes, independent of torch."""

    def conv(cin, cout, k=3):
        return cin * cout * k * k + cout

    def norm(c):
        return 2 * c

    def res(cin, cout, temb):
        n = norm(cin) + conv(cin, cout) + (temb * cout + cout) + norm(cout) + conv(cout, cout)
        if cin != cout:
            n += conv(cin, cout, k=1)
        return n

    ch = [cfg.base_channels * m for m in cfg.channel_multipliers]
    temb = cfg.time_embed_dim
    total = (cfg.vocab_character + cfg.vocab_script + cfg.vocab_style) * temb
    total += 2 * (temb * temb + temb)  # time MLP
    total += conv(1, ch[0])
    cin = ch[0]
    for i, c in enumerate(ch):
        total += res(cin, c, temb)
        cin = c
        if i < len(ch) - 1:
            total += conv(c, c)
    total += res(ch[-1], ch[-1], temb)
    for i in reversed(range(len(ch))):
        total += res(ch[i] * 2, ch[i], temb)
        if i > 0:
            total += conv(ch[i], ch[i - 1])
    total += norm(ch[0]) + conv(ch[0], 1)
    return total


class TestInit:
    def test_deterministic(self, tiny_config):
        a = init_params(tiny_config, seed=3)
        b = init_params(tiny_config, seed=3)
        for (na, ta), (nb, tb) in zip(a.tensors().items(), b.tensors().items()):
            assert na == nb
            assert np.array_equal(ta, tb)

    def test_seed_changes_weights(self, tiny_config):
        a = init_params(tiny_config, seed=3)
        b = init_params(tiny_config, seed=4)
        assert any(
            not np.array_equal(ta, tb)
            for ta, tb in zip(a.tensors().values(), b.tensors().values())
        )

    def test_fresh_forward_is_zero(self, tiny_config):
        params = init_params(tiny_config, seed=1)
        x = np.random.default_rng(0).standard_normal(tiny_config.resolution).astype(np.float32)
        out = forward(params, x, 3, ConditionLabel(0, 1, 0))
        assert np.all(out == 0.0)

    def test_param_count_matches_formula(self, tiny_config):
        for cfg in (tiny_config, probe_config(), DenoiserConfig(vocab_character=20,
                                                                vocab_script=3,
                                                                vocab_style=3)):
            assert init_params(cfg, 0).param_count == analytic_param_count(cfg)

    def test_default_param_count_pinned(self):
        cfg = DenoiserConfig(vocab_character=20, vocab_script=3, vocab_style=3)
        assert init_params(cfg, 0).param_count == DEFAULT_PARAM_COUNT

    def test_bad_resolution_rejected(self):
        cfg = DenoiserConfig(resolution=(30, 30))
        with pytest.raises(ValueError):
            init_params(cfg, 0)


class TestEmbedCondition:
    def test_deterministic_and_shape(self, tiny_params, tiny_config):
        v1 = embed_condition(tiny_params, ConditionLabel(1, 0, 1))
        v2 = embed_condition(tiny_params, ConditionLabel(1, 0, 1))
        assert np.array_equal(v1, v2)
        assert v1.shape == (tiny_config.time_embed_dim,)

    def test_additive_structure_exact(self, tiny_params):
        t = tiny_params.tensors()
        ec = t["embed_character.weight"]
        es = t["embed_script.weight"]
        est = t["embed_style.weight"]
        got = embed_condition(tiny_params, ConditionLabel(2, 0, 1)) - embed_condition(
            tiny_params, ConditionLabel(2, 1, 1)
        )
        want = (ec[2] + es[0] + est[1]) - (ec[2] + es[1] + est[1])
        assert np.array_equal(got, want)

    def test_out_of_bounds(self, tiny_params):
        with pytest.raises(ValueError):
            embed_condition(tiny_params, ConditionLabel(999, 0, 0))


class TestForward:
    def test_deterministic(self, tiny_trained):
        x = np.random.default_rng(5).standard_normal((16, 16)).astype(np.float32)
        a = forward(tiny_trained.params, x, 4, ConditionLabel(0, 0, 0))
        b = forward(tiny_trained.params, x, 4, ConditionLabel(0, 0, 0))
        assert np.array_equal(a, b)

    def test_rejects_bad_input(self, tiny_params):
        x = np.full((16, 16), np.nan, dtype=np.float32)
        with pytest.raises(ValueError):
            forward(tiny_params, x, 1, ConditionLabel(0, 0, 0))
        with pytest.raises(ValueError):
            forward(tiny_params, np.zeros((16, 16), np.float32), 0, ConditionLabel(0, 0, 0))

    def test_conditioning_sensitivity_after_training(self, tiny_trained):
        x = np.random.default_rng(8).standard_normal((16, 16)).astype(np.float32)
        outs = [
            forward(tiny_trained.params, x, 5, ConditionLabel(0, s, 0)) for s in (0, 1)
        ]
        assert not np.array_equal(outs[0], outs[1])


class TestGradientCheck:
    def test_matches_central_differences(self):
        cfg = probe_config()
        assert analytic_param_count(cfg) <= 2000
        params = init_params(cfg, seed=2).astype(torch.float64)
        # perturb away from the zero-output init so gradients flow everywhere
        gen = torch.Generator().manual_seed(99)
        with torch.no_grad():
            for p in params.module.parameters():
                p.add_(torch.empty_like(p).uniform_(-0.05, 0.05, generator=gen))

        schedule = diffusion.make_schedule(6, 0.02, 0.2)
        rng = np.random.default_rng(0)
        batch = [
            (rng.uniform(-1, 1, (8, 8)).astype(np.float32), ConditionLabel(0, 0, 1)),
            (rng.uniform(-1, 1, (8, 8)).astype(np.float32), ConditionLabel(2, 1, 0)),
        ]
        seed = 31
        _, grads = diffusion.training_loss(params, batch, schedule, seed=seed)

        named = dict(params.module.named_parameters())
        coords = []
        pick = np.random.default_rng(77)
        names = sorted(named)
        sizes = np.array([named[n].numel() for n in names], dtype=np.float64)
        for _ in range(60):
            name = names[int(pick.choice(len(names), p=sizes / sizes.sum()))]
            coords.append((name, int(pick.integers(0, named[name].numel()))))

        h = 1e-3
        worst = 0.0
        for name, flat_idx in coords:
            tensor = named[name]
            with torch.no_grad():
                orig = tensor.view(-1)[flat_idx].item()
                tensor.view(-1)[flat_idx] = orig + h
                lp, _ = diffusion.training_loss(params, batch, schedule, seed, with_grads=False)
                tensor.view(-1)[flat_idx] = orig - h
                lm, _ = diffusion.training_loss(params, batch, schedule, seed, with_grads=False)
                tensor.view(-1)[flat_idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[flat_idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
        assert worst < 1e-3, f"worst relative gradient error {worst}"


class TestTrain:
    def test_zero_steps_identity(self, tiny_params, tiny_train, tiny_schedule):
        ckpt = train(tiny_params, tiny_train, tiny_schedule, TrainConfig(steps=0, seed=1))
        for a, b in zip(ckpt.params.tensors().values(), tiny_params.tensors().values()):
            assert np.array_equal(a, b)
        assert ckpt.step_count == 0

    def test_loss_decreases_on_toy_problem(self, tiny_schedule, tiny_train):
        one = type(tiny_train)(
            images=tiny_train.images[:1],
            labels=tiny_train.labels[:1],
            vocab_character=tiny_train.vocab_character,
            vocab_script=tiny_train.vocab_script,
            vocab_style=tiny_train.vocab_style,
            resolution=tiny_train.resolution,
        )
        cfg = DenoiserConfig(
            resolution=(16, 16), base_channels=8, channel_multipliers=(1, 2),
            time_embed_dim=32, vocab_character=len(one.vocab_character),
            vocab_script=len(one.vocab_script), vocab_style=len(one.vocab_style), groups=4,
        )
        params = init_params(cfg, seed=0)
        ckpt = train(
            params, one, tiny_schedule,
            TrainConfig(lr=1e-3, batch=4, steps=200, seed=3, loss_every=10),
        )
        losses = ckpt.loss_history
        assert len(losses) >= 10
        first = float(np.mean(losses[:3]))
        last = float(np.mean(losses[-3:]))
        assert last < first

    def test_deterministic(self, tiny_config, tiny_train, tiny_schedule):
        params = init_params(tiny_config, seed=5)
        kwargs = dict(lr=1e-3, batch=4, steps=40, seed=9)
        a = train(params, tiny_train, tiny_schedule, TrainConfig(**kwargs))
        b = train(params, tiny_train, tiny_schedule, TrainConfig(**kwargs))
        for ta, tb in zip(a.params.tensors().values(), b.params.tensors().values()):
            assert np.array_equal(ta, tb)
        assert a.loss_history == b.loss_history

    def test_input_params_unchanged(self, tiny_config, tiny_train, tiny_schedule):
        params = init_params(tiny_config, seed=5)
        before = {k: v.copy() for k, v in params.tensors().items()}
        train(params, tiny_train, tiny_schedule, TrainConfig(steps=10, seed=1))
        for k, v in params.tensors().items():
            assert np.array_equal(v, before[k])


class TestCheckpointIO:
    def _roundtrip(self, ckpt, tmp_path):
        path = tmp_path / "model.cpkt"
        save_checkpoint(ckpt, path)
        return path, load_checkpoint(path)

    def test_bit_exact_roundtrip(self, tiny_trained, tmp_path):
        _, back = self._roundtrip(tiny_trained, tmp_path)
        a, b = tiny_trained.params.tensors(), back.params.tensors()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
        assert back.step_count == tiny_trained.step_count
        assert back.vocabularies == tiny_trained.vocabularies
        assert back.schedule_spec == tiny_trained.schedule_spec

    def test_forward_identical_after_reload(self, tiny_trained, tmp_path):
        _, back = self._roundtrip(tiny_trained, tmp_path)
        x = np.random.default_rng(1).standard_normal((16, 16)).astype(np.float32)
        a = forward(tiny_trained.params, x, 3, ConditionLabel(1, 1, 1))
        b = forward(back.params, x, 3, ConditionLabel(1, 1, 1))
        assert np.array_equal(a, b)

    def test_truncated_file_rejected(self, tiny_trained, tmp_path):
        path, _ = self._roundtrip(tiny_trained, tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tiny_trained, tmp_path):
        path, _ = self._roundtrip(tiny_trained, tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cpkt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
