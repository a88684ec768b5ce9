"""Conditional noise-prediction network.

A small U-Net over single-channel images. The timestep enters through a
sinusoidal embedding; the (character, script, style) condition is three
learned embedding rows summed into that embedding before the per-block
projections. The final output convolution is zero-initialized so a fresh
network predicts zero noise everywhere.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import ConditionLabel, LoadedDataset
from .rng import child_seed, stream
from .tensorio import CheckpointFormatError, read_tensor_file, write_tensor_file

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "Checkpoint",
    "TrainConfig",
    "TrainingDiverged",
    "init_params",
    "embed_condition",
    "forward",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: tuple[int, int] = (32, 32)
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    vocab_character: int = 1
    vocab_script: int = 1
    vocab_style: int = 1
    groups: int = 8

    def validate(self) -> None:
        h, w = self.resolution
        levels = len(self.channel_multipliers)
        div = 2 ** (levels - 1)
        if h % div or w % div:
            raise ValueError(f"resolution {self.resolution} not divisible by {div}")
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("base_channels >= 1 and even time_embed_dim >= 2 required")
        if min(self.vocab_character, self.vocab_script, self.vocab_style) < 1:
            raise ValueError("vocabulary sizes must be positive")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        return (self.vocab_character, self.vocab_script, self.vocab_style)

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "time_embed_dim": self.time_embed_dim,
            "vocab_character": self.vocab_character,
            "vocab_script": self.vocab_script,
            "vocab_style": self.vocab_style,
            "groups": self.groups,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            resolution=tuple(d["resolution"]),
            base_channels=d["base_channels"],
            channel_multipliers=tuple(d["channel_multipliers"]),
            time_embed_dim=d["time_embed_dim"],
            vocab_character=d["vocab_character"],
            vocab_script=d["vocab_script"],
            vocab_style=d["vocab_style"],
            groups=d["groups"],
        )


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(groups, channels)
    return nn.GroupNorm(g, channels)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(torch.nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class _UNet(nn.Module):
    """Encoder/decoder with one residual block per level and skip concat."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * m for m in cfg.channel_multipliers]
        temb = cfg.time_embed_dim
        self.embed_character = nn.Embedding(cfg.vocab_character, temb)
        self.embed_script = nn.Embedding(cfg.vocab_script, temb)
        self.embed_style = nn.Embedding(cfg.vocab_style, temb)
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))

        self.conv_in = nn.Conv2d(1, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cin = ch[0]
        for i, c in enumerate(ch):
            self.down_blocks.append(_ResBlock(cin, c, temb, cfg.groups))
            cin = c
            if i < len(ch) - 1:
                self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.middle = _ResBlock(ch[-1], ch[-1], temb, cfg.groups)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(ch))):
            self.up_blocks.append(_ResBlock(ch[i] * 2, ch[i], temb, cfg.groups))
            if i > 0:
                self.upsamples.append(nn.Conv2d(ch[i], ch[i - 1], 3, padding=1))
        self.norm_out = _norm(ch[0], cfg.groups)
        self.conv_out = nn.Conv2d(ch[0], 1, 3, padding=1)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        half = self.cfg.time_embed_dim // 2
        device, dtype = t.device, torch.float32
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / max(half - 1, 1)
        )
        args = t.to(dtype)[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    def condition_embedding(self, cond: torch.Tensor) -> torch.Tensor:
        return (
            self.embed_character(cond[:, 0])
            + self.embed_script(cond[:, 1])
            + self.embed_style(cond[:, 2])
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        dtype = self.conv_in.weight.dtype
        emb = self.time_embedding(t).to(dtype) + self.condition_embedding(cond)
        emb = self.time_mlp(emb)

        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.middle(h, emb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), emb)
            if i < len(self.upsamples):
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


@dataclass
class DenoiserParams:
    """Parameter container over the torch module, with numpy-facing helpers."""

    config: DenoiserConfig
    module: _UNet

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def torch_dtype(self) -> torch.dtype:
        return self.module.conv_in.weight.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().to(torch.float32).numpy().copy()
            for name, p in self.module.state_dict().items()
        }

    def clone(self) -> "DenoiserParams":
        return DenoiserParams(config=self.config, module=copy.deepcopy(self.module))

    def astype(self, dtype: torch.dtype) -> "DenoiserParams":
        out = self.clone()
        out.module.to(dtype)
        return out

    def predict_noise_torch(
        self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor
    ) -> torch.Tensor:
        """Differentiable eps prediction; x is [B, H, W]."""
        return self.module(x.unsqueeze(1), t, cond).squeeze(1)

    def predict_noise(self, x: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Inference-only eps prediction on numpy arrays ([B, H, W])."""
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).to(self.torch_dtype)
            out = self.predict_noise_torch(
                xt, torch.from_numpy(np.asarray(t, dtype=np.int64)),
                torch.from_numpy(np.asarray(cond, dtype=np.int64)),
            )
        return out.to(torch.float32).numpy()

    def grads_of(self, loss: torch.Tensor) -> dict[str, np.ndarray]:
        self.module.zero_grad(set_to_none=True)
        loss.backward()
        return {
            name: p.grad.detach().to(torch.float32).numpy().copy()
            for name, p in self.module.named_parameters()
        }


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Deterministic fan-in-scaled uniform init; output conv zeroed."""
    config.validate()
    module = _UNet(config)
    gen = torch.Generator().manual_seed(child_seed(seed, "init"))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Embedding):
                bound = 1.0 / math.sqrt(m.embedding_dim)
                m.weight.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        module.conv_out.weight.zero_()
        module.conv_out.bias.zero_()
    return DenoiserParams(config=config, module=module)


def embed_condition(params: DenoiserParams, cond: ConditionLabel) -> np.ndarray:
    """e_char[c] + e_script[s] + e_style[st] as a float32 vector."""
    cond.validate(params.config.vocab_sizes)
    with torch.no_grad():
        rows = torch.tensor([[cond.character, cond.script, cond.style]])
        return params.module.condition_embedding(rows)[0].to(torch.float32).numpy()


def forward(params: DenoiserParams, x_t: np.ndarray, t: int, cond: ConditionLabel) -> np.ndarray:
    """Predicted noise for a single [H, W] state at step t."""
    x_t = np.asarray(x_t, dtype=np.float32)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("non-finite input state")
    if t < 1:
        raise ValueError(f"step index {t} must be >= 1")
    cond.validate(params.config.vocab_sizes)
    rows = np.array([[cond.character, cond.script, cond.style]], dtype=np.int64)
    return params.predict_noise(x_t[None], np.array([t]), rows)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 16
    steps: int = 1000
    seed: int = 0
    loss_every: int = 50
    loss_tail: int = 200


@dataclass
class Checkpoint:
    params: DenoiserParams
    step_count: int
    loss_history: list[float]
    schedule_spec: tuple[int, float, float]
    vocabularies: dict[str, list[str]]


def train(
    params: DenoiserParams,
    dataset: LoadedDataset,
    schedule,
    opt_config: TrainConfig,
) -> Checkpoint:
    """Adam on the noise-prediction MSE; deterministic for a fixed seed."""
    from .diffusion import training_loss

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.vocab_sizes != params.config.vocab_sizes:
        raise ValueError(
            f"dataset vocab sizes {dataset.vocab_sizes} != config {params.config.vocab_sizes}"
        )
    out = params.clone()
    vocabularies = {
        "character": dataset.vocab_character,
        "script": dataset.vocab_script,
        "style": dataset.vocab_style,
    }
    losses: list[float] = []
    if opt_config.steps > 0:
        opt = torch.optim.Adam(out.module.parameters(), lr=opt_config.lr, betas=(0.9, 0.999))
        n = len(dataset)
        for k in range(opt_config.steps):
            idx = stream(opt_config.seed, "batch", k).integers(0, n, size=opt_config.batch)
            batch = [(dataset.images[i], dataset.label_at(i)) for i in idx]
            try:
                loss, _ = training_loss(
                    out, batch, schedule, seed=child_seed(opt_config.seed, "loss", k)
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(f"loss non-finite at step {k}") from exc
            opt.step()
            if k % opt_config.loss_every == 0 or k == opt_config.steps - 1:
                losses.append(loss)
    return Checkpoint(
        params=out,
        step_count=opt_config.steps,
        loss_history=losses[-opt_config.loss_tail :],
        schedule_spec=tuple(schedule.spec),
        vocabularies=vocabularies,
    )


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    metadata = {
        "kind": "denoiser",
        "config": ckpt.params.config.to_dict(),
        "vocabularies": ckpt.vocabularies,
        "step_count": ckpt.step_count,
        "loss_history": ckpt.loss_history,
        "schedule": {
            "T": ckpt.schedule_spec[0],
            "beta_start": ckpt.schedule_spec[1],
            "beta_end": ckpt.schedule_spec[2],
        },
    }
    write_tensor_file(path, metadata, ckpt.params.tensors())


def load_checkpoint(path: str | Path) -> Checkpoint:
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "denoiser":
        raise CheckpointFormatError(f"{path} is not a denoiser checkpoint")
    config = DenoiserConfig.from_dict(metadata["config"])
    config.validate()
    vocab = metadata["vocabularies"]
    if (len(vocab["character"]), len(vocab["script"]), len(vocab["style"])) != config.vocab_sizes:
        raise CheckpointFormatError("vocabulary lengths disagree with embedded config")
    params = init_params(config, seed=0)
    state = params.module.state_dict()
    if set(state.keys()) != set(tensors.keys()):
        raise CheckpointFormatError("tensor names disagree with embedded config")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointFormatError(
                f"tensor {name} has shape {arr.shape}, expected {tuple(state[name].shape)}"
            )
        state[name] = torch.from_numpy(arr)
    params.module.load_state_dict(state)
    sched = metadata["schedule"]
    return Checkpoint(
        params=params,
        step_count=metadata["step_count"],
        loss_history=list(metadata["loss_history"]),
        schedule_spec=(sched["T"], sched["beta_start"], sched["beta_end"]),
        vocabularies={k: list(v) for k, v in vocab.items()},
    )
