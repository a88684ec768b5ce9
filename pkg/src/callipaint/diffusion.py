"""Noise schedules, the forward process, the training objective, and
ancestral sampling.

Step indices are 1-based: t runs over [1, T], with the convention
alpha_bar(0) = 1, which makes the posterior variance at t=1 exactly zero.
Schedule tables are kept in float64; image math runs in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import GlyphImage, ConditionLabel
from .rng import stream

__all__ = [
    "NoiseSchedule",
    "SampleTrace",
    "TraceOptions",
    "make_schedule",
    "q_sample",
    "training_loss",
    "ddpm_step",
    "sample",
    "sample_batch",
    "DEFAULT_T",
    "DEFAULT_BETA_START",
    "DEFAULT_BETA_END",
]

# Defaults follow the standard linear schedule scaled to T steps
# (beta range multiplied by 1000/T), which keeps alpha_bar(T) well under 0.05.
DEFAULT_T = 200
DEFAULT_BETA_START = 5e-4
DEFAULT_BETA_END = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables for a T-step forward process.

    ``betas[t-1]`` is the step-t variance increment; ``alpha_bars[t-1]`` the
    cumulative signal retention; ``posterior_vars[t-1]`` the reverse-process
    variance (zero at t=1).
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        self._check_t(t)
        return float(self.posterior_vars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} outside [1, {self.T}]")

    @property
    def spec(self) -> tuple[int, float, float]:
        """The (T, beta_start, beta_end) triple identifying this schedule."""
        return (self.T, self.beta_start, self.beta_end)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_vars = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


# ---------------------------------------------------------------------------
# Forward process
# ---------------------------------------------------------------------------


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = schedule.alpha_bar(t)
    c_sig = np.float32(math.sqrt(abar))
    c_noise = np.float32(math.sqrt(1.0 - abar))
    return c_sig * x0 + c_noise * eps


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------


def training_loss(
    params,
    batch: Sequence[tuple[np.ndarray, ConditionLabel]],
    schedule: NoiseSchedule,
    seed: int,
    with_grads: bool = True,
):
    """Noise-prediction MSE over a batch with seeded (t, eps) draws.

    For each item, t ~ Uniform{1..T} and eps ~ N(0, I) come from substreams
    of ``seed``, so the loss is a deterministic function of
    (params, batch, schedule, seed). Returns ``(loss, grads)`` where grads is
    a name -> array dict matching the parameter tensors, or ``(loss, None)``
    when ``with_grads`` is false.

    ``params`` must expose ``predict_noise_torch(x, t, cond)`` operating on
    torch tensors (see the denoiser module).
    """
    import torch

    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    x0s = np.stack([np.asarray(x, dtype=np.float32) for x, _ in batch])
    conds = np.array(
        [(c.character, c.script, c.style) for _, c in batch], dtype=np.int64
    )
    B = x0s.shape[0]
    ts = stream(seed, "t").integers(1, schedule.T + 1, size=B)
    eps = stream(seed, "eps").standard_normal(x0s.shape, dtype=np.float32)

    sig = np.sqrt(schedule.alpha_bars[ts - 1]).astype(np.float32)[:, None, None]
    noi = np.sqrt(1.0 - schedule.alpha_bars[ts - 1]).astype(np.float32)[:, None, None]
    xts = sig * x0s + noi * eps

    dtype = getattr(params, "torch_dtype", torch.float32)
    xt_t = torch.from_numpy(xts).to(dtype)
    eps_t = torch.from_numpy(eps).to(dtype)
    t_t = torch.from_numpy(ts.astype(np.int64))
    cond_t = torch.from_numpy(conds)

    eps_hat = params.predict_noise_torch(xt_t, t_t, cond_t)
    loss_t = torch.mean((eps_t - eps_hat) ** 2)
    loss = float(loss_t.detach())
    if not math.isfinite(loss):
        raise FloatingPointError("training loss is non-finite")
    if not with_grads:
        return loss, None
    grads = params.grads_of(loss_t)
    return loss, grads


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def ddpm_step(
    params,
    x_t: np.ndarray,
    t: int,
    cond: ConditionLabel,
    schedule: NoiseSchedule,
    z: np.ndarray | None,
) -> np.ndarray:
    """One ancestral reverse step from x_t to x_{t-1}.

    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t);
    x_{t-1} = mu + sqrt(posterior_var_t) * z. At t=1 the variance is zero and
    ``z`` must be None.
    """
    schedule._check_t(t)
    if t == 1 and z is not None:
        raise ValueError("z must be None at t=1 (final step is deterministic)")
    if t > 1 and z is None:
        raise ValueError("z is required for t > 1")
    x_t = np.asarray(x_t, dtype=np.float32)
    eps_hat = _predict(params, x_t, t, cond)
    c1 = np.float32(1.0 / math.sqrt(schedule.alpha(t)))
    c2 = np.float32(schedule.beta(t) / math.sqrt(1.0 - schedule.alpha_bar(t)))
    mu = c1 * (x_t - c2 * eps_hat)
    if t == 1:
        return mu
    sigma = np.float32(math.sqrt(schedule.posterior_var(t)))
    return mu + sigma * np.asarray(z, dtype=np.float32)


def _predict(params, x: np.ndarray, t: int, cond) -> np.ndarray:
    """Batched or single eps prediction; x is [H,W] or [B,H,W]."""
    if x.ndim == 2:
        return params.predict_noise(x[None], np.array([t]), _cond_rows([cond]))[0]
    ts = np.full(x.shape[0], t, dtype=np.int64)
    return params.predict_noise(x, ts, _cond_rows(cond))


def _cond_rows(conds) -> np.ndarray:
    return np.array([(c.character, c.script, c.style) for c in conds], dtype=np.int64)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceOptions:
    """What to retain while sampling; stride 0 keeps no intermediates."""

    stride: int = 0

    def keep(self, action_index: int) -> bool:
        return self.stride > 0 and action_index % self.stride == 0


@dataclass
class SampleTrace:
    """Replayable record of one sampling or inpainting run."""

    seed: int
    condition: ConditionLabel
    steps: list[int] = field(default_factory=list)  # t of each denoise action
    actions: list[str] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)  # pre-clamp states
    stride: int = 0

    @property
    def denoise_count(self) -> int:
        return len(self.steps)

    @property
    def plan_length(self) -> int:
        return len(self.actions)

    def record(self, action: str, t: int | None, state: np.ndarray, opts: TraceOptions) -> None:
        self.actions.append(action)
        if t is not None:
            self.steps.append(t)
        if opts.keep(len(self.actions) - 1):
            self.images.append(state.copy())

    def export(self, out_dir) -> None:
        """Write retained states as PNGs plus a plan manifest."""
        import json
        from pathlib import Path

        from .corpus import to_unit8_range
        from PIL import Image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        kept = [i for i in range(len(self.actions)) if self.stride > 0 and i % self.stride == 0]
        for img_idx, action_idx in enumerate(kept[: len(self.images)]):
            arr = np.clip(self.images[img_idx], -1.0, 1.0)
            name = f"t{action_idx:04d}_{self.actions[action_idx]}.png"
            Image.fromarray(to_unit8_range(arr), mode="L").save(out / name)
        plan = {
            "seed": self.seed,
            "condition": {
                "character": self.condition.character,
                "script": self.condition.script,
                "style": self.condition.style,
            },
            "actions": self.actions,
            "denoise_count": self.denoise_count,
            "plan_length": self.plan_length,
            "stride": self.stride,
        }
        (out / "plan.json").write_text(json.dumps(plan, indent=2), encoding="utf-8")


def sample(
    params,
    cond: ConditionLabel,
    schedule: NoiseSchedule,
    seed: int,
    trace_opts: TraceOptions = TraceOptions(),
) -> tuple[GlyphImage, SampleTrace]:
    """Ancestral sampling from pure noise down to t=1.

    Pure function of (params, cond, schedule, seed). The output is clamped to
    [-1, +1] only at the very end; trace states are pre-clamp.
    """
    images, traces = sample_batch(params, [cond], schedule, [seed], trace_opts)
    return images[0], traces[0]


def sample_batch(
    params,
    conds: Sequence[ConditionLabel],
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    trace_opts: TraceOptions = TraceOptions(),
) -> tuple[list[GlyphImage], list[SampleTrace]]:
    """Vectorized ancestral sampling; item i draws only from substreams of
    seeds[i], so results do not depend on who shares the batch."""
    if len(conds) != len(seeds):
        raise ValueError("conds and seeds must have equal length")
    h, w = params.config.resolution
    B = len(conds)
    x = np.stack([stream(s, "x_init").standard_normal((h, w), dtype=np.float32) for s in seeds])
    traces = [
        SampleTrace(seed=s, condition=c, stride=trace_opts.stride) for s, c in zip(seeds, conds)
    ]
    for i, tr in enumerate(traces):
        tr.actions.append("init")
        if trace_opts.keep(0):
            tr.images.append(x[i].copy())

    for t in range(schedule.T, 0, -1):
        if t > 1:
            z = np.stack(
                [stream(s, "z", t, 0).standard_normal((h, w), dtype=np.float32) for s in seeds]
            )
        else:
            z = None
        x = _ddpm_step_batch(params, x, t, conds, schedule, z)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at t={t}")
        for i, tr in enumerate(traces):
            tr.actions.append(f"denoise{t}")
            tr.steps.append(t)
            if trace_opts.keep(len(tr.actions) - 1):
                tr.images.append(x[i].copy())

    out = np.clip(x, -1.0, 1.0)
    return [GlyphImage(out[i], "model") for i in range(B)], traces


def _ddpm_step_batch(
    params,
    x: np.ndarray,
    t: int,
    conds: Sequence[ConditionLabel],
    schedule: NoiseSchedule,
    z: np.ndarray | None,
) -> np.ndarray:
    eps_hat = _predict(params, x, t, conds)
    c1 = np.float32(1.0 / math.sqrt(schedule.alpha(t)))
    c2 = np.float32(schedule.beta(t) / math.sqrt(1.0 - schedule.alpha_bar(t)))
    mu = c1 * (x - c2 * eps_hat)
    if t == 1:
        return mu
    sigma = np.float32(math.sqrt(schedule.posterior_var(t)))
    return mu + sigma * z
