import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from callipaint import corpus
from callipaint.corpus import (
    CorpusError,
    FontSource,
    GlyphImage,
    Mask,
    MaskSpec,
    MissingGlyphError,
    compose_condition_image,
    random_mask,
    render_glyph,
    to_model_range,
    to_unit8_range,
)

from conftest import FONT_SANS, FONT_SERIF

# Measured once for 'A' in DejaVu Sans at 32x32; regression bound +/- 0.05.
PINNED_COVERAGE_A = 0.1104


class TestRenderGlyph:
    def test_space_renders_empty(self):
        img = render_glyph(" ", FONT_SANS, (32, 32))
        assert img.ink_coverage() == 0.0
        assert np.all(img.pixels == 255)

    def test_deterministic(self):
        a = render_glyph("Q", FONT_SANS, (32, 32))
        b = render_glyph("Q", FONT_SANS, (32, 32))
        assert np.array_equal(a.pixels, b.pixels)

    def test_pinned_coverage(self):
        img = render_glyph("A", FONT_SANS, (32, 32))
        assert abs(img.ink_coverage() - PINNED_COVERAGE_A) <= 0.05
        assert 0.02 < img.ink_coverage() < 0.6

    def test_margin_and_centering(self):
        img = render_glyph("M", FONT_SANS, (32, 32))
        px = img.pixels
        border = np.concatenate([px[:2].ravel(), px[-2:].ravel(),
                                 px[:, :2].ravel(), px[:, -2:].ravel()])
        assert np.all(border == 255), "2-pixel margin must stay blank"
        ys, xs = np.where(px < 128)
        cy, cx = (ys.min() + ys.max()) / 2, (xs.min() + xs.max()) / 2
        assert abs(cy - 15.5) <= 1.5 and abs(cx - 15.5) <= 1.5

    def test_missing_glyph_raises(self):
        # DejaVu has no Han ideographs.
        with pytest.raises(MissingGlyphError):
            render_glyph("永", FONT_SANS, (32, 32))

    def test_unreadable_font(self, tmp_path):
        bad = tmp_path / "nofont.ttf"
        bad.write_bytes(b"not a font")
        with pytest.raises(corpus.UnreadableFontError):
            render_glyph("A", str(bad), (32, 32))

    def test_too_small_resolution(self):
        with pytest.raises(ValueError):
            render_glyph("A", FONT_SANS, (4, 4))


class TestRangeConversion:
    def test_endpoints(self):
        assert to_model_range(np.array([255], dtype=np.uint8))[0] == pytest.approx(1.0)
        assert to_model_range(np.array([0], dtype=np.uint8))[0] == pytest.approx(-1.0)

    def test_midpoint(self):
        # 128/127.5 - 1
        got = to_model_range(np.array([128], dtype=np.uint8))[0]
        assert got == pytest.approx(128 / 127.5 - 1, abs=1e-6)

    def test_round_trip_exact_all_values(self):
        u = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert np.array_equal(to_unit8_range(to_model_range(u)), u)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_random_images(self, seed):
        u = np.random.default_rng(seed).integers(0, 256, size=(8, 8)).astype(np.uint8)
        assert np.array_equal(to_unit8_range(to_model_range(u)), u)

    def test_model_range_validation(self):
        with pytest.raises(ValueError):
            GlyphImage(np.full((4, 4), 1.5, dtype=np.float32), "model")
        with pytest.raises(ValueError):
            GlyphImage(np.full((4, 4), np.nan, dtype=np.float32), "model")


class TestManifest:
    def test_counts_and_split(self, tmp_path):
        manifest = corpus.build_manifest(
            characters=list("ABCDEFGHIJ"),
            sources=[FontSource(FONT_SANS, "regular", "sans"),
                     FontSource(FONT_SERIF, "clerical", "serif")],
            out_dir=tmp_path / "c",
            val_fraction=0.2,
            seed=1,
            resolution=(16, 16),
        )
        assert len(manifest.entries) == 20
        assert sum(e.split == "train" for e in manifest.entries) == 16
        assert sum(e.split == "val" for e in manifest.entries) == 4
        assert manifest.vocab_character == sorted("ABCDEFGHIJ")

    def test_rebuild_byte_identical(self, tmp_path):
        kwargs = dict(
            characters=list("ABC"),
            sources=[FontSource(FONT_SANS, "regular", "sans")],
            val_fraction=0.34,
            seed=9,
            resolution=(16, 16),
        )
        corpus.build_manifest(out_dir=tmp_path / "one", **kwargs)
        corpus.build_manifest(out_dir=tmp_path / "two", **kwargs)
        a = (tmp_path / "one" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "two" / "manifest.jsonl").read_bytes()
        assert a == b
        for e in corpus.load_manifest(tmp_path / "one" / "manifest.jsonl").entries:
            pa = (tmp_path / "one" / e.path).read_bytes()
            pb = (tmp_path / "two" / e.path).read_bytes()
            assert pa == pb

    def test_single_pair_manifest(self, tmp_path):
        manifest = corpus.build_manifest(
            characters=["Z"],
            sources=[FontSource(FONT_SANS, "regular", "sans")],
            out_dir=tmp_path / "m",
            val_fraction=0.2,
            seed=0,
            resolution=(16, 16),
        )
        assert len(manifest.entries) == 1

    def test_empty_spec_refused(self, tmp_path):
        with pytest.raises(CorpusError):
            corpus.build_manifest([], [FontSource(FONT_SANS, "a", "b")], tmp_path / "x")

    def test_render_error_names_pair(self, tmp_path):
        with pytest.raises(CorpusError, match="U\\+6C38"):
            corpus.build_manifest(
                ["永"], [FontSource(FONT_SANS, "regular", "sans")], tmp_path / "x"
            )


class TestLoadDataset:
    def test_split_counts(self, tiny_corpus, tiny_train, tiny_val):
        n = len(tiny_corpus.entries)
        assert len(tiny_train) + len(tiny_val) == n
        assert len(tiny_val) == round(n * 0.25)

    def test_model_range(self, tiny_train):
        assert tiny_train.images.dtype == np.float32
        assert tiny_train.images.min() >= -1.0 and tiny_train.images.max() <= 1.0

    def test_deterministic_shuffle(self, tiny_corpus):
        a = corpus.load_dataset(tiny_corpus, "train", shuffle_seed=4)
        b = corpus.load_dataset(tiny_corpus, "train", shuffle_seed=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_missing_file(self, tmp_path, tiny_corpus):
        manifest_path = tiny_corpus.base_dir / "manifest.jsonl"
        broken = tmp_path / "broken.jsonl"
        broken.write_text(manifest_path.read_text())
        with pytest.raises(CorpusError):
            corpus.load_dataset(broken, "train")


class TestRandomMask:
    def test_empty_spec(self):
        m = random_mask(0, MaskSpec(n_rects=0), (32, 32))
        assert m.coverage == 0.0

    def test_deterministic(self):
        a = random_mask(42, MaskSpec(2, 0.2, 0.5), (32, 32))
        b = random_mask(42, MaskSpec(2, 0.2, 0.5), (32, 32))
        assert np.array_equal(a.bits, b.bits)

    def test_exact_half_rect(self):
        m = random_mask(7, MaskSpec(1, 0.5, 0.5), (32, 32))
        assert m.coverage == pytest.approx(256 / 1024)

    @given(
        seed=st.integers(0, 10_000),
        k=st.integers(0, 4),
        fmax=st.floats(0.05, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_union_bound(self, seed, k, fmax):
        m = random_mask(seed, MaskSpec(k, 0.0, fmax), (32, 32))
        assert m.coverage <= min(1.0, k * fmax * fmax) + 1e-12


class TestCompose:
    def _pair(self):
        rng = np.random.default_rng(0)
        base = GlyphImage(rng.integers(0, 256, (16, 16)).astype(np.uint8), "unit8")
        patch = GlyphImage(rng.integers(0, 256, (16, 16)).astype(np.uint8), "unit8")
        return base, patch

    def test_zero_mask_is_base(self):
        base, patch = self._pair()
        out = compose_condition_image(base, patch, Mask.zeros((16, 16)))
        assert np.array_equal(out.pixels, base.pixels)

    def test_full_mask_is_patch(self):
        base, patch = self._pair()
        out = compose_condition_image(base, patch, Mask.ones((16, 16)))
        assert np.array_equal(out.pixels, patch.pixels)

    def test_half_mask(self):
        base, patch = self._pair()
        bits = np.zeros((16, 16), dtype=np.uint8)
        bits[:, :8] = 1
        out = compose_condition_image(base, patch, Mask(bits))
        assert np.array_equal(out.pixels[:, :8], patch.pixels[:, :8])
        assert np.array_equal(out.pixels[:, 8:], base.pixels[:, 8:])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_mask_algebra(self, seed):
        rng = np.random.default_rng(seed)
        b = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        p = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        m = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        out = compose_condition_image(
            GlyphImage(b, "model"), GlyphImage(p, "model"), Mask(m)
        )
        expected = m * p + (1 - m) * b
        assert np.array_equal(out.pixels, expected.astype(np.float32))

    def test_resolution_mismatch(self):
        base, patch = self._pair()
        with pytest.raises(ValueError):
            compose_condition_image(base, patch, Mask.zeros((8, 8)))


class TestMaskPng:
    def test_round_trip(self, tmp_path):
        m = random_mask(3, MaskSpec(2, 0.2, 0.6), (32, 32))
        m.save_png(tmp_path / "m.png")
        back = Mask.load_png(tmp_path / "m.png")
        assert np.array_equal(m.bits, back.bits)

    def test_polarity(self, tmp_path):
        bits = np.zeros((8, 8), dtype=np.uint8)
        bits[0, 0] = 1
        Mask(bits).save_png(tmp_path / "m.png")
        from PIL import Image

        raw = np.asarray(Image.open(tmp_path / "m.png"))
        assert raw[0, 0] == 255 and raw[1, 1] == 0
