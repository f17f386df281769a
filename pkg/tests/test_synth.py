import json

import numpy as np
import pytest

from filigree import (BinaryPattern, SynthConfig, gen_benchmark,
                      plain_synthetic, randomized_synthetic)
from filigree.extract import load_image
from filigree.synth import blurred_mask, pattern_iou, random_pattern, \
    render_drawing


def manual_gaussian_blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, truncated at 3 sigma, reflective borders;
    written independently of scipy for the synthesis oracle."""
    radius = int(3.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-x * x / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    def conv1d(arr, axis):
        out = np.zeros_like(arr)
        # edge-inclusive reflection (a b c .. -> b a | a b c)
        padded = np.pad(arr, [(radius, radius) if ax == axis else (0, 0)
                              for ax in range(arr.ndim)], mode="symmetric")
        for i, kv in enumerate(kernel):
            sl = [slice(None)] * arr.ndim
            sl[axis] = slice(i, i + arr.shape[axis])
            out += kv * padded[tuple(sl)]
        return out

    return conv1d(conv1d(mask.astype(np.float64), 0), 1)


def disk_pattern(side=64, r=18):
    yy, xx = np.mgrid[:side, :side]
    mask = ((yy - side // 2) ** 2 + (xx - side // 2) ** 2 <= r * r)
    return BinaryPattern(mask.astype(np.uint8))


class TestBinaryPattern:
    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            BinaryPattern(np.full((4, 4), 0.5))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            BinaryPattern(np.zeros((4, 4, 2), dtype=np.uint8))


class TestPlainSynthetic:
    def test_empty_pattern_rejected(self):
        with pytest.raises(ValueError):
            plain_synthetic(BinaryPattern(np.zeros((8, 8), dtype=np.uint8)))

    def test_single_pixel_values(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[3, 4] = 1
        img = plain_synthetic(BinaryPattern(mask))
        assert img.pixels[3, 4] == pytest.approx(0.70, abs=1e-6)
        assert img.pixels[0, 0] == pytest.approx(0.55, abs=1e-6)

    def test_mean_difference_equals_offset(self):
        pat = disk_pattern()
        img = plain_synthetic(pat, background=0.5, offset=0.2)
        fg = img.pixels[pat.mask == 1].astype(np.float64)
        bg = img.pixels[pat.mask == 0].astype(np.float64)
        assert fg.mean() - bg.mean() == pytest.approx(0.2, abs=1e-6)

    def test_background_from_sample_photos(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0, 0] = 1
        stats = [np.full((4, 4), 0.3), np.full((4, 4), 0.5)]
        img = plain_synthetic(BinaryPattern(mask), reference_photo_stats=stats)
        assert img.pixels[5, 5] == pytest.approx(0.4, abs=1e-6)


class TestRandomizedSynthetic:
    def test_far_pixel_is_background(self):
        pat = disk_pattern(side=96, r=10)
        cfg = SynthConfig(background="flat", background_value=0.5)
        img = randomized_synthetic(pat, cfg, seed=1)
        assert img.pixels[2, 2] == pytest.approx(0.5, abs=1e-12)

    def test_interior_pixel_fixed_noise(self):
        pat = disk_pattern(side=96, r=30)
        cfg = SynthConfig(background="flat", background_value=0.5,
                          noise_low=0.2, noise_high=0.2)
        img = randomized_synthetic(pat, cfg, seed=2)
        assert img.pixels[48, 48] == pytest.approx(0.7, abs=1e-6)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        pat = BinaryPattern(mask)
        cfg = SynthConfig(blur_sigma=1.5, noise_low=0.05, noise_high=0.35,
                          background="flat", background_value=0.5)
        seed = 99
        img = randomized_synthetic(pat, cfg, seed)

        blurred = manual_gaussian_blur(mask, 1.5)
        r_field = np.random.default_rng(seed).uniform(0.05, 0.35, size=(16, 16))
        expected = np.clip(0.5 + r_field * blurred, 0.0, 1.0)
        np.testing.assert_allclose(img.pixels, expected, atol=1e-6)

    def test_zero_noise_returns_background_exactly(self):
        pat = disk_pattern()
        cfg = SynthConfig(background="flat", background_value=0.42,
                          noise_low=0.0, noise_high=0.0)
        img = randomized_synthetic(pat, cfg, seed=4)
        assert np.all(img.pixels == np.float32(0.42))

    def test_deterministic_per_seed(self):
        pat = disk_pattern()
        cfg = SynthConfig(background="sampled-paper")
        a = randomized_synthetic(pat, cfg, seed=5)
        b = randomized_synthetic(pat, cfg, seed=5)
        c = randomized_synthetic(pat, cfg, seed=6)
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_blur_conserves_mass_interior(self):
        mask = np.zeros((128, 128), dtype=np.uint8)
        mask[40:88, 40:88] = 1
        ge = blurred_mask(BinaryPattern(mask), sigma=1.5)
        assert ge.sum() == pytest.approx(mask.sum(), rel=1e-3)
        assert ge.min() >= 0.0 and ge.max() <= 1.0 + 1e-12


class TestConfigValidation:
    def test_blur_sigma_positive(self):
        with pytest.raises(ValueError):
            SynthConfig(blur_sigma=0.0)

    def test_noise_range(self):
        with pytest.raises(ValueError):
            SynthConfig(noise_low=-1.5)
        with pytest.raises(ValueError):
            SynthConfig(noise_low=0.5, noise_high=0.1)


class TestGenBenchmark:
    def test_counts_and_manifest(self, tmp_path):
        manifest = gen_benchmark(tmp_path / "c", n_classes=2,
                                 photos_per_class=1, seed=3)
        lines = [json.loads(l) for l in manifest.read_text().splitlines()]
        assert len(lines) == 6  # 2 x (drawing + reference + 1 photo)
        domains = sorted(l["domain"] for l in lines)
        assert domains == ["drawing"] * 2 + ["photograph"] * 2 + ["synthetic"] * 2
        pngs = sorted(p.name for p in (tmp_path / "c").glob("*.png"))
        assert len(pngs) == 6

    def test_same_seed_byte_identical(self, tmp_path):
        m1 = gen_benchmark(tmp_path / "a", n_classes=2, photos_per_class=2, seed=9)
        m2 = gen_benchmark(tmp_path / "b", n_classes=2, photos_per_class=2, seed=9)
        assert m1.read_text() == m2.read_text()
        for p1 in sorted((tmp_path / "a").glob("*.png")):
            p2 = tmp_path / "b" / p1.name
            assert p1.read_bytes() == p2.read_bytes(), p1.name

    def test_patterns_distinct(self, tmp_path):
        gen_benchmark(tmp_path / "d", n_classes=6, photos_per_class=1, seed=1)
        masks = []
        for p in sorted((tmp_path / "d").glob("*_drawing.png")):
            px = load_image(p)
            masks.append(BinaryPattern((px < 0.5).astype(np.uint8)))
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                assert pattern_iou(masks[i], masks[j]) < 0.9

    def test_needs_two_classes(self, tmp_path):
        with pytest.raises(ValueError):
            gen_benchmark(tmp_path / "e", n_classes=1, photos_per_class=1, seed=0)

    def test_splits_follow_convention(self, tmp_path):
        manifest = gen_benchmark(tmp_path / "f", n_classes=2,
                                 photos_per_class=3, seed=2)
        lines = [json.loads(l) for l in manifest.read_text().splitlines()]
        for rec in lines:
            if rec["domain"] == "drawing":
                assert (rec["split"], rec["role"]) == ("train", "reference")
            elif rec["domain"] == "synthetic":
                assert (rec["split"], rec["role"]) == ("test", "reference")
            else:
                assert rec["role"] == "query"
        photo_splits = [r["split"] for r in lines if r["domain"] == "photograph"
                        and r["class_id"] == "class0000"]
        assert photo_splits == ["test", "train", "train"]


class TestPatternHelpers:
    def test_random_pattern_stroke_count_range(self):
        rng = np.random.default_rng(8)
        pat = random_pattern(256, rng)
        assert pat.foreground > 0
        assert set(np.unique(pat.mask)) <= {0, 1}

    def test_render_drawing_levels(self):
        pat = disk_pattern()
        img = render_drawing(pat)
        assert img.pixels[pat.mask == 1].max() == pytest.approx(0.10, abs=1e-6)
        assert img.pixels[pat.mask == 0].min() == pytest.approx(0.95, abs=1e-6)
