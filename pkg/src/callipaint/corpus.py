"""Glyph corpus: rendering, labeling, serialization, and mask tooling.

Images are single-channel. Two value ranges are used throughout the package:

* ``unit8``: integers in [0, 255], dark ink on light background (PNG range).
* ``model``: floats in [-1, +1], the range the diffusion model works in.

The affine map between them is ``x_model = x_unit8 / 127.5 - 1``; it is exactly
invertible after rounding back to the integer grid.

Masks are binary maps with 1 = inpaint (unknown) and 0 = keep (known). On disk
a mask pixel 255 means inpaint, 0 means keep.
"""

from __future__ import annotations

import functools
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from fontTools.ttLib import TTFont

from .rng import stream

__all__ = [
    "GlyphImage",
    "ConditionLabel",
    "Manifest",
    "ManifestEntry",
    "Mask",
    "MaskSpec",
    "LoadedDataset",
    "CorpusError",
    "MissingGlyphError",
    "UnreadableFontError",
    "render_glyph",
    "build_manifest",
    "load_manifest",
    "load_dataset",
    "random_mask",
    "compose_condition_image",
    "to_model_range",
    "to_unit8_range",
]

DEFAULT_RESOLUTION = (32, 32)
GLYPH_MARGIN = 2


class CorpusError(Exception):
    """Base error for corpus building and loading."""


class MissingGlyphError(CorpusError):
    """The font has no glyph for the requested code point."""


class UnreadableFontError(CorpusError):
    """The font file could not be opened or parsed."""


# ---------------------------------------------------------------------------
# Images and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlyphImage:
    """A single-channel image plus its declared value range."""

    pixels: np.ndarray
    range_tag: str  # "unit8" or "model"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"expected H x W pixels, got shape {px.shape}")
        if self.range_tag == "unit8":
            px = px.astype(np.uint8) if px.dtype != np.uint8 else px
        elif self.range_tag == "model":
            px = px.astype(np.float32, copy=False)
            if not np.all(np.isfinite(px)):
                raise ValueError("model-range image contains non-finite values")
            if px.size and (px.min() < -1.0 or px.max() > 1.0):
                raise ValueError("model-range image outside [-1, +1]")
        else:
            raise ValueError(f"unknown range_tag {self.range_tag!r}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape

    def to_model(self) -> "GlyphImage":
        if self.range_tag == "model":
            return self
        return GlyphImage(to_model_range(self.pixels), "model")

    def to_unit8(self) -> "GlyphImage":
        if self.range_tag == "unit8":
            return self
        return GlyphImage(to_unit8_range(self.pixels), "unit8")

    def ink_coverage(self, threshold: int = 128) -> float:
        """Fraction of pixels darker than ``threshold`` (unit8 scale)."""
        u = self.to_unit8().pixels
        return float(np.count_nonzero(u < threshold)) / u.size

    def save_png(self, path: str | Path) -> None:
        Image.fromarray(self.to_unit8().pixels, mode="L").save(path, format="PNG")

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.to_unit8().pixels, mode="L").save(buf, format="PNG")
        return buf.getvalue()

    @staticmethod
    def load_png(path: str | Path) -> "GlyphImage":
        with Image.open(path) as im:
            return GlyphImage(np.asarray(im.convert("L")), "unit8")

    @staticmethod
    def from_png_bytes(data: bytes) -> "GlyphImage":
        with Image.open(io.BytesIO(data)) as im:
            return GlyphImage(np.asarray(im.convert("L")), "unit8")


def to_model_range(unit8: np.ndarray) -> np.ndarray:
    """unit8 [0,255] -> model [-1,+1] via x/127.5 - 1."""
    return (np.asarray(unit8, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def to_unit8_range(model: np.ndarray) -> np.ndarray:
    """model [-1,+1] -> unit8 [0,255]; inverse of to_model_range on the grid."""
    x = (np.asarray(model, dtype=np.float32) + np.float32(1.0)) * np.float32(127.5)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Mask:
    """Binary H x W map; 1 = inpaint (unknown), 0 = keep (known)."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"expected H x W mask, got shape {b.shape}")
        b = b.astype(np.uint8, copy=False)
        if b.size and not np.all((b == 0) | (b == 1)):
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", b)

    @property
    def coverage(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0

    @property
    def resolution(self) -> tuple[int, int]:
        return self.bits.shape

    def save_png(self, path: str | Path) -> None:
        Image.fromarray(self.bits * np.uint8(255), mode="L").save(path, format="PNG")

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.bits * np.uint8(255), mode="L").save(buf, format="PNG")
        return buf.getvalue()

    @staticmethod
    def load_png(path: str | Path) -> "Mask":
        with Image.open(path) as im:
            return Mask(_threshold_mask(np.asarray(im.convert("L"))))

    @staticmethod
    def from_png_bytes(data: bytes) -> "Mask":
        with Image.open(io.BytesIO(data)) as im:
            return Mask(_threshold_mask(np.asarray(im.convert("L"))))

    @staticmethod
    def zeros(resolution: tuple[int, int]) -> "Mask":
        return Mask(np.zeros(resolution, dtype=np.uint8))

    @staticmethod
    def ones(resolution: tuple[int, int]) -> "Mask":
        return Mask(np.ones(resolution, dtype=np.uint8))


def _threshold_mask(gray: np.ndarray) -> np.ndarray:
    return (gray >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# Labels and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionLabel:
    """(character, script, style) ids into the manifest vocabularies."""

    character: int
    script: int
    style: int

    def validate(self, vocab_sizes: tuple[int, int, int]) -> None:
        for name, idx, size in zip(
            ("character", "script", "style"),
            (self.character, self.script, self.style),
            vocab_sizes,
        ):
            if not 0 <= idx < size:
                raise ValueError(f"{name} id {idx} out of range [0, {size})")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    character: str
    script: str
    style: str
    split: str  # "train" or "val"


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    vocab_character: list[str]
    vocab_script: list[str]
    vocab_style: list[str]
    resolution: tuple[int, int]
    base_dir: Path = field(default_factory=Path)

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        return (len(self.vocab_character), len(self.vocab_script), len(self.vocab_style))

    def label_for(self, entry: ManifestEntry) -> ConditionLabel:
        return ConditionLabel(
            character=self.vocab_character.index(entry.character),
            script=self.vocab_script.index(entry.script),
            style=self.vocab_style.index(entry.style),
        )

    def validate(self) -> None:
        for vocab, name in (
            (self.vocab_character, "character"),
            (self.vocab_script, "script"),
            (self.vocab_style, "style"),
        ):
            if len(set(vocab)) != len(vocab):
                raise CorpusError(f"duplicate names in {name} vocabulary")
        seen: dict[tuple[str, str, str], str] = {}
        for e in self.entries:
            if e.split not in ("train", "val"):
                raise CorpusError(f"bad split {e.split!r} for {e.path}")
            key = (e.character, e.script, e.style)
            if key in seen and seen[key] != e.split:
                raise CorpusError(f"combination {key} appears in more than one split")
            seen[key] = e.split
            full = self.base_dir / e.path
            if not full.exists():
                raise CorpusError(f"missing image file {full}")


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    header = {
        "vocab_character": manifest.vocab_character,
        "vocab_script": manifest.vocab_script,
        "vocab_style": manifest.vocab_style,
        "height": manifest.resolution[0],
        "width": manifest.resolution[1],
    }
    lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
    for e in manifest.entries:
        lines.append(
            json.dumps(
                {
                    "path": e.path,
                    "character": e.character,
                    "script": e.script,
                    "style": e.style,
                    "split": e.split,
                },
                sort_keys=True,
                ensure_ascii=False,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusError(f"empty manifest {path}")
    header = json.loads(lines[0])
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        entries.append(
            ManifestEntry(
                path=d["path"],
                character=d["character"],
                script=d["script"],
                style=d["style"],
                split=d["split"],
            )
        )
    manifest = Manifest(
        entries=entries,
        vocab_character=list(header["vocab_character"]),
        vocab_script=list(header["vocab_script"]),
        vocab_style=list(header["vocab_style"]),
        resolution=(int(header["height"]), int(header["width"])),
        base_dir=path.parent,
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_RENDER_SCALE = 8  # supersampling factor before downsampling to target


@functools.lru_cache(maxsize=32)
def _font_cmap(font_path: str) -> frozenset[int]:
    try:
        tt = TTFont(font_path, fontNumber=0, lazy=True)
        cmap = tt.getBestCmap()
        tt.close()
    except Exception as exc:
        raise UnreadableFontError(f"cannot read font {font_path}: {exc}") from exc
    return frozenset(cmap.keys())


@functools.lru_cache(maxsize=32)
def _load_font(font_path: str, size: int) -> ImageFont.FreeTypeFont:
    try:
        return ImageFont.truetype(font_path, size=size)
    except OSError as exc:
        raise UnreadableFontError(f"cannot open font {font_path}: {exc}") from exc


# em size as a fraction of the canvas side; keeps natural glyph proportions
# (stroke width, aspect, serifs) comparable across fonts instead of
# stretching every glyph to fill the canvas.
_EM_FRACTION = 0.8


def render_glyph(
    character: str,
    font_path: str | Path,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
) -> GlyphImage:
    """Render one code point as dark ink on a light background.

    Deterministic for fixed inputs. Glyphs are rendered at a fixed em size
    relative to the canvas so different fonts keep their natural metrics; the
    ink box is centered with at least a 2-pixel margin (oversized glyphs are
    shrunk to fit). Whitespace code points yield an all-background image.
    """
    if len(character) != 1:
        raise ValueError("character must be a single code point")
    h, w = resolution
    if h < 8 or w < 8:
        raise ValueError("resolution must be at least 8x8")
    font_path = str(font_path)
    codepoint = ord(character)
    cmap = _font_cmap(font_path)
    if codepoint not in cmap and not character.isspace():
        raise MissingGlyphError(
            f"font {os.path.basename(font_path)} has no glyph for U+{codepoint:04X}"
        )

    em = int(round(_EM_FRACTION * min(h, w))) * _RENDER_SCALE
    font = _load_font(font_path, em)
    pad = 2 * em
    canvas = Image.new("L", (pad * 2 + em, pad * 2 + em), 255)
    draw = ImageDraw.Draw(canvas)
    draw.text((pad, pad), character, font=font, fill=0)
    # getbbox on an inverted copy finds the ink extent (canvas is white).
    ink = Image.eval(canvas, lambda v: 255 - v).getbbox()
    if ink is None:  # no ink at all (e.g. space)
        return GlyphImage(np.full((h, w), 255, dtype=np.uint8), "unit8")
    glyph = canvas.crop(ink)
    box_h, box_w = h - 2 * GLYPH_MARGIN, w - 2 * GLYPH_MARGIN
    scale = min(1.0 / _RENDER_SCALE,
                box_w / glyph.width, box_h / glyph.height)
    new_w = max(1, min(box_w, int(round(glyph.width * scale))))
    new_h = max(1, min(box_h, int(round(glyph.height * scale))))
    glyph = glyph.resize((new_w, new_h), Image.LANCZOS)
    out = Image.new("L", (w, h), 255)
    out.paste(glyph, ((w - new_w) // 2, (h - new_h) // 2))
    return GlyphImage(np.asarray(out), "unit8")


# ---------------------------------------------------------------------------
# Corpus building and loading
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FontSource:
    """One font file standing in for a (script, style) pair."""

    font_path: str
    script: str
    style: str


def build_manifest(
    characters: Sequence[str],
    sources: Sequence[FontSource],
    out_dir: str | Path,
    val_fraction: float = 0.2,
    seed: int = 0,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
) -> Manifest:
    """Render every (character, source) pair and write images plus a manifest.

    The train/val split is a seeded assignment over (character, source) pairs,
    so each labeled combination lands in exactly one split. Rebuilding with
    the same arguments reproduces the manifest file byte for byte.
    """
    characters = list(dict.fromkeys(characters))  # dedupe, keep order
    if not characters or not sources:
        raise CorpusError("corpus spec needs at least one character and one font source")
    if not 0.0 < val_fraction < 1.0:
        raise CorpusError("val_fraction must be in (0, 1)")
    pairs = [(ch, src) for ch in characters for src in sources]
    for src in sources:
        if (src.script, src.style) in {
            (s.script, s.style) for s in sources if s is not src
        }:
            raise CorpusError(f"duplicate (script, style) pair {(src.script, src.style)}")

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    n_val = int(round(len(pairs) * val_fraction))
    order = stream(seed, "split").permutation(len(pairs))
    val_idx = set(int(i) for i in order[:n_val])

    entries = []
    for i, (ch, src) in enumerate(pairs):
        try:
            img = render_glyph(ch, src.font_path, resolution)
        except CorpusError as exc:
            raise CorpusError(
                f"rendering U+{ord(ch):04X} with {src.font_path} failed: {exc}"
            ) from exc
        rel = f"images/{src.script}_{src.style}_u{ord(ch):04x}.png"
        img.save_png(out_dir / rel)
        entries.append(
            ManifestEntry(
                path=rel,
                character=ch,
                script=src.script,
                style=src.style,
                split="val" if i in val_idx else "train",
            )
        )

    manifest = Manifest(
        entries=entries,
        vocab_character=sorted(characters),
        vocab_script=sorted({s.script for s in sources}),
        vocab_style=sorted({s.style for s in sources}),
        resolution=resolution,
        base_dir=out_dir,
    )
    manifest.validate()
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


@dataclass
class LoadedDataset:
    """Images in model range plus integer labels, ready for training."""

    images: np.ndarray  # [N, H, W] float32 in [-1, +1]
    labels: np.ndarray  # [N, 3] int64 (character, script, style)
    vocab_character: list[str]
    vocab_script: list[str]
    vocab_style: list[str]
    resolution: tuple[int, int]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        return (len(self.vocab_character), len(self.vocab_script), len(self.vocab_style))

    def label_at(self, i: int) -> ConditionLabel:
        c, s, st = self.labels[i]
        return ConditionLabel(int(c), int(s), int(st))


def load_dataset(
    manifest: Manifest | str | Path,
    split: str,
    shuffle_seed: int | None = None,
) -> LoadedDataset:
    """Load one split as model-range images with integer labels.

    Order follows the manifest; pass ``shuffle_seed`` for a deterministic
    permutation instead.
    """
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if split not in ("train", "val"):
        raise CorpusError(f"unknown split {split!r}")
    selected = [e for e in manifest.entries if e.split == split]
    if shuffle_seed is not None:
        order = stream(shuffle_seed, "shuffle").permutation(len(selected))
        selected = [selected[int(i)] for i in order]

    h, w = manifest.resolution
    images = np.empty((len(selected), h, w), dtype=np.float32)
    labels = np.empty((len(selected), 3), dtype=np.int64)
    for i, e in enumerate(selected):
        img = GlyphImage.load_png(manifest.base_dir / e.path)
        if img.resolution != (h, w):
            raise CorpusError(
                f"{e.path}: resolution {img.resolution} != manifest {manifest.resolution}"
            )
        images[i] = to_model_range(img.pixels)
        labels[i] = (
            manifest.vocab_character.index(e.character),
            manifest.vocab_script.index(e.script),
            manifest.vocab_style.index(e.style),
        )
    return LoadedDataset(
        images=images,
        labels=labels,
        vocab_character=list(manifest.vocab_character),
        vocab_script=list(manifest.vocab_script),
        vocab_style=list(manifest.vocab_style),
        resolution=(h, w),
    )


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """Union-of-rectangles mask spec; fractions are of each image side."""

    n_rects: int = 1
    min_frac: float = 0.25
    max_frac: float = 0.5

    def validate(self) -> None:
        if self.n_rects < 0:
            raise ValueError("n_rects must be >= 0")
        if not 0.0 <= self.min_frac <= self.max_frac <= 1.0:
            raise ValueError("need 0 <= min_frac <= max_frac <= 1")


def random_mask(
    seed: int,
    spec: MaskSpec,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
) -> Mask:
    """Union of ``n_rects`` axis-aligned rectangles with seeded geometry.

    Each side length is drawn uniformly in [min_frac, max_frac] of the image
    side and floored to whole pixels, so coverage never exceeds
    ``n_rects * max_frac**2``.
    """
    spec.validate()
    return _mask_from_rng(stream(seed, "mask"), spec, resolution)


def _mask_from_rng(
    rng: np.random.Generator, spec: MaskSpec, resolution: tuple[int, int]
) -> Mask:
    h, w = resolution
    bits = np.zeros((h, w), dtype=np.uint8)
    for _ in range(spec.n_rects):
        fh = rng.uniform(spec.min_frac, spec.max_frac)
        fw = rng.uniform(spec.min_frac, spec.max_frac)
        rh = int(fh * h)
        rw = int(fw * w)
        if rh == 0 or rw == 0:
            continue
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        bits[y0 : y0 + rh, x0 : x0 + rw] = 1
    return Mask(bits)


def compose_condition_image(base: GlyphImage, patch: GlyphImage, patch_mask: Mask) -> GlyphImage:
    """Patch pixels where the mask is 1, base pixels elsewhere."""
    if base.resolution != patch.resolution or base.resolution != patch_mask.resolution:
        raise ValueError(
            f"resolution mismatch: base {base.resolution}, patch {patch.resolution}, "
            f"mask {patch_mask.resolution}"
        )
    if base.range_tag != patch.range_tag:
        patch = patch.to_model() if base.range_tag == "model" else patch.to_unit8()
    out = np.where(patch_mask.bits == 1, patch.pixels, base.pixels)
    return GlyphImage(out, base.range_tag)
