"""Mask-conditioned inpainting scheduler.

At every reverse step the known region is forward-sampled from the condition
image in closed form, the unknown region is denoised by the model, and the
two are merged through the mask. After each block of ``jump_len`` denoise
steps the state is re-noised by the same amount and the block is redone,
``n_resample`` times in total, which harmonizes the generated region with its
surroundings. The known region is stamped onto the output at the end, so
unmasked pixels always equal the condition image exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import ConditionLabel, GlyphImage, Mask
from .diffusion import (
    NoiseSchedule,
    SampleTrace,
    TraceOptions,
    _ddpm_step_batch,
    q_sample,
)
from .rng import stream

__all__ = [
    "InpaintConfig",
    "TimePlan",
    "Denoise",
    "JumpForward",
    "build_time_plan",
    "known_sample",
    "combine",
    "jump_forward",
    "inpaint",
    "inpaint_batch",
]

DEFAULT_JUMP_LEN = 10
DEFAULT_N_RESAMPLE = 5


@dataclass(frozen=True)
class Denoise:
    t: int


@dataclass(frozen=True)
class JumpForward:
    from_t: int
    to_t: int


@dataclass(frozen=True)
class TimePlan:
    T: int
    jump_len: int
    n_resample: int
    actions: tuple

    @property
    def denoise_count(self) -> int:
        return sum(1 for a in self.actions if isinstance(a, Denoise))

    @property
    def jump_count(self) -> int:
        return sum(1 for a in self.actions if isinstance(a, JumpForward))


@dataclass(frozen=True)
class InpaintConfig:
    """Knobs for the resampling schedule; seed governs all noise draws."""

    jump_len: int = DEFAULT_JUMP_LEN
    n_resample: int = DEFAULT_N_RESAMPLE
    seed: int = 0
    trace: TraceOptions = field(default_factory=TraceOptions)

    def validate(self, T: int) -> None:
        if self.jump_len < 1 or self.n_resample < 1:
            raise ValueError("jump_len and n_resample must be >= 1")
        if self.jump_len > T:
            raise ValueError(f"jump_len {self.jump_len} exceeds T={T}")
        if T % self.jump_len:
            raise ValueError(f"T={T} must be divisible by jump_len {self.jump_len}")


def build_time_plan(T: int, jump_len: int, n_resample: int) -> TimePlan:
    """Blocked descent T..1 where each block of ``jump_len`` steps is executed
    ``n_resample`` times, re-noising forward by ``jump_len`` between passes."""
    InpaintConfig(jump_len=jump_len, n_resample=n_resample).validate(T)
    actions: list = []
    for hi in range(T, 0, -jump_len):
        lo = hi - jump_len + 1
        for r in range(n_resample):
            actions.extend(Denoise(t) for t in range(hi, lo - 1, -1))
            if r < n_resample - 1:
                actions.append(JumpForward(from_t=lo - 1, to_t=lo - 1 + jump_len))
    return TimePlan(T=T, jump_len=jump_len, n_resample=n_resample, actions=tuple(actions))


def known_sample(
    x0_cond: np.ndarray, t: int, schedule: NoiseSchedule, eps: np.ndarray | None
) -> np.ndarray:
    """Forward sample of the condition image at step t; t=0 returns it as is."""
    x0_cond = np.asarray(x0_cond, dtype=np.float32)
    if t == 0:
        return x0_cond
    if eps is None:
        raise ValueError("eps is required for t >= 1")
    return q_sample(x0_cond, t, eps, schedule)


def combine(mask: Mask | np.ndarray, known: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    """known where mask=0, unknown where mask=1 (pixelwise)."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    if bits.shape != known.shape[-2:] or known.shape != unknown.shape:
        raise ValueError(
            f"shape mismatch: mask {bits.shape}, known {known.shape}, unknown {unknown.shape}"
        )
    return np.where(bits == 1, unknown, known)


def jump_forward(
    x_t: np.ndarray,
    t: int,
    jump_len: int,
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """Re-noise from step t to t+jump_len by composing the one-step forward
    kernel, with fresh noise per substep."""
    return _jump_forward_noise(
        x_t, t, jump_len, schedule,
        lambda s: stream(seed, "jump_step", s).standard_normal(
            np.asarray(x_t).shape, dtype=np.float32
        ),
    )


def _jump_forward_noise(x, t, jump_len, schedule, noise_at) -> np.ndarray:
    if t + jump_len > schedule.T:
        raise ValueError(f"jump from {t} by {jump_len} exceeds T={schedule.T}")
    x = np.asarray(x, dtype=np.float32)
    for s in range(t + 1, t + jump_len + 1):
        c_sig = np.float32(math.sqrt(schedule.alpha(s)))
        c_noise = np.float32(math.sqrt(schedule.beta(s)))
        x = c_sig * x + c_noise * noise_at(s)
    return x


# ---------------------------------------------------------------------------
# The inpainting loop
# ---------------------------------------------------------------------------


def inpaint(
    params,
    image_cond: GlyphImage,
    mask: Mask,
    cond: ConditionLabel,
    schedule: NoiseSchedule,
    config: InpaintConfig,
) -> tuple[GlyphImage, SampleTrace]:
    """Mask-conditioned generation: keep the condition image outside the mask,
    generate inside it. Pure function of its inputs including the seed."""
    images, traces = inpaint_batch(
        params, [image_cond], [mask], [cond], schedule, [config.seed], config
    )
    return images[0], traces[0]


def inpaint_batch(
    params,
    image_conds: Sequence[GlyphImage],
    masks: Sequence[Mask],
    conds: Sequence[ConditionLabel],
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    config: InpaintConfig,
) -> tuple[list[GlyphImage], list[SampleTrace]]:
    """Vectorized inpainting; item i draws only from substreams of seeds[i]."""
    config.validate(schedule.T)
    B = len(image_conds)
    if not (len(masks) == len(conds) == len(seeds) == B):
        raise ValueError("image_conds, masks, conds, seeds must have equal length")
    h, w = params.config.resolution
    for img, m in zip(image_conds, masks):
        if img.range_tag != "model":
            raise ValueError("condition image must be in model range")
        if img.resolution != (h, w) or m.resolution != (h, w):
            raise ValueError(
                f"resolution mismatch: image {img.resolution}, mask {m.resolution}, "
                f"model {(h, w)}"
            )

    plan = build_time_plan(schedule.T, config.jump_len, config.n_resample)
    x0s = np.stack([img.pixels for img in image_conds])
    bits = np.stack([m.bits for m in masks])
    opts = config.trace

    x = np.stack([stream(s, "x_init").standard_normal((h, w), dtype=np.float32) for s in seeds])
    traces = [
        SampleTrace(seed=s, condition=c, stride=opts.stride) for s, c in zip(seeds, conds)
    ]
    for i, tr in enumerate(traces):
        tr.actions.append("init")
        if opts.keep(0):
            tr.images.append(x[i].copy())

    visits: dict[int, int] = {}
    for action_idx, action in enumerate(plan.actions):
        if isinstance(action, Denoise):
            t = action.t
            v = visits.get(t, 0)
            visits[t] = v + 1
            z = None
            if t > 1:
                z = np.stack(
                    [
                        stream(s, "z", t, v).standard_normal((h, w), dtype=np.float32)
                        for s in seeds
                    ]
                )
            unknown = _ddpm_step_batch(params, x, t, conds, schedule, z)
            if t - 1 >= 1:
                eps_known = np.stack(
                    [
                        stream(s, "known", t, v).standard_normal((h, w), dtype=np.float32)
                        for s in seeds
                    ]
                )
                known = q_sample(x0s, t - 1, eps_known, schedule)
            else:
                known = x0s
            x = np.where(bits == 1, unknown, known)
            label = f"denoise{t}"
        else:
            x = _jump_forward_noise(
                x,
                action.from_t,
                action.to_t - action.from_t,
                schedule,
                lambda s: np.stack(
                    [
                        stream(sd, "jump", action_idx, s).standard_normal(
                            (h, w), dtype=np.float32
                        )
                        for sd in seeds
                    ]
                ),
            )
            label = f"jump{action.from_t}to{action.to_t}"
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state after action {action_idx} ({label})")
        for i, tr in enumerate(traces):
            tr.actions.append(label)
            if isinstance(action, Denoise):
                tr.steps.append(action.t)
            if opts.keep(len(tr.actions) - 1):
                tr.images.append(x[i].copy())

    out = np.clip(x, -1.0, 1.0)
    out = np.where(bits == 1, out, x0s)  # final stamp: unmasked region is exact
    return [GlyphImage(out[i], "model") for i in range(B)], traces
