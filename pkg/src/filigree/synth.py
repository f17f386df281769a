"""Synthetic reference images and a procedural benchmark corpus.

Plain synthetic references paint the binary stroke pattern slightly lighter
than a paper-colored background; randomized synthetics composite the
Gaussian-blurred pattern with a per-pixel random gain onto a background
(S = B + R * (G convolved with E), clamped to [0, 1]).  The benchmark
generator draws random watermark-like patterns and emits a desk-scale corpus
(drawings, references, perturbed photographs) with a dataset manifest, fully
deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .extract import CanonicalImage, save_image

DRAWING_BG = 0.95
DRAWING_FG = 0.10
PLAIN_BG = 0.55
PLAIN_OFFSET = 0.15


@dataclass(frozen=True)
class BinaryPattern:
    """Strictly binary stroke mask, 1 on watermark wire, 0 elsewhere."""

    mask: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"pattern mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("pattern mask must contain only 0 and 1")
        m = np.ascontiguousarray(m.astype(np.uint8))
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def foreground(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the randomized synthesis S = B + R * (G * E)."""

    blur_sigma: float = 1.5
    noise_low: float = 0.08
    noise_high: float = 0.35
    background: str = "flat"  # flat | sampled-paper
    background_value: float = 0.5
    clamp: bool = True

    def __post_init__(self):
        if self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        for v in (self.noise_low, self.noise_high):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"noise bound {v} outside [-1, 1]")
        if self.noise_low > self.noise_high:
            raise ValueError("noise_low must be <= noise_high")
        if self.background not in ("flat", "sampled-paper"):
            raise ValueError(f"unknown background source {self.background!r}")


def blurred_mask(pattern: BinaryPattern, sigma: float) -> np.ndarray:
    """Normalized Gaussian blur of the mask (truncated at 3 sigma, reflective
    borders); values stay in [0, 1] and total mass is conserved for interior
    patterns."""
    return gaussian_filter(pattern.mask.astype(np.float64), sigma=sigma,
                           mode="reflect", truncate=3.0)


def plain_synthetic(pattern: BinaryPattern, reference_photo_stats=None,
                    background: float = PLAIN_BG,
                    offset: float = PLAIN_OFFSET) -> CanonicalImage:
    """Flat-background rendering with the stroke pattern brightened.

    The background is the mean of the sample photographs when provided
    (``reference_photo_stats``: iterable of [0, 1] pixel arrays), else the
    configured constant.
    """
    if pattern.foreground == 0:
        raise ValueError("pattern has empty foreground")
    if reference_photo_stats is not None:
        samples = [np.asarray(s, dtype=np.float64) for s in reference_photo_stats]
        if samples:
            background = float(np.mean([s.mean() for s in samples]))
    img = np.full(pattern.mask.shape, background, dtype=np.float64)
    img[pattern.mask == 1] += offset
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return CanonicalImage(img, provenance=pattern.provenance + "|plain")


def _background(shape, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.background == "flat":
        return np.full(shape, cfg.background_value, dtype=np.float64)
    # paper-like fiber texture: high-frequency low-amplitude noise (smooth
    # low-frequency fields would create ramp-like cells that spuriously match
    # any stroke edge)
    noise = rng.normal(0.0, 0.035, size=shape)
    return cfg.background_value + gaussian_filter(noise, sigma=1.2, mode="reflect")


def randomized_synthetic(pattern: BinaryPattern, cfg: SynthConfig,
                         seed: int) -> CanonicalImage:
    """Composite the blurred pattern onto a background with random gain.

    Pixelwise S = B + R * (G * E) where the random field R is drawn
    uniformly in [noise_low, noise_high] from ``default_rng(seed)`` (after
    any background sampling), then clamped to [0, 1].  Deterministic per
    seed.
    """
    rng = np.random.default_rng(seed)
    shape = pattern.mask.shape
    B = _background(shape, cfg, rng)
    GE = blurred_mask(pattern, cfg.blur_sigma)
    R = rng.uniform(cfg.noise_low, cfg.noise_high, size=shape)
    S = B + R * GE
    if cfg.clamp:
        S = np.clip(S, 0.0, 1.0)
    return CanonicalImage(S.astype(np.float32),
                          provenance=pattern.provenance + f"|randomized:{seed}")


def random_pattern(side: int, rng: np.random.Generator,
                   provenance: str = "") -> BinaryPattern:
    """Random watermark-like composition of 3-8 strokes.

    Strokes are circle outlines, open polylines and elliptical arcs drawn
    with small thickness inside the central region of the canvas.
    """
    mask = np.zeros((side, side), dtype=np.uint8)
    n_strokes = int(rng.integers(3, 9))
    lo, hi = int(side * 0.15), int(side * 0.85)
    for _ in range(n_strokes):
        kind = int(rng.integers(0, 3))
        thickness = int(rng.integers(2, 5))
        if kind == 0:
            center = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
            radius = int(rng.integers(side // 16, side // 5))
            cv2.circle(mask, center, radius, 1, thickness)
        elif kind == 1:
            n_pts = int(rng.integers(2, 6))
            pts = rng.integers(lo, hi, size=(n_pts, 2)).astype(np.int32)
            cv2.polylines(mask, [pts], False, 1, thickness)
        else:
            center = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
            axes = (int(rng.integers(side // 12, side // 4)),
                    int(rng.integers(side // 16, side // 6)))
            angle = float(rng.uniform(0, 180))
            start = float(rng.uniform(0, 360))
            sweep = float(rng.uniform(60, 300))
            cv2.ellipse(mask, center, axes, angle, start, start + sweep, 1,
                        thickness)
    return BinaryPattern(mask, provenance=provenance)


def pattern_iou(a: BinaryPattern, b: BinaryPattern) -> float:
    inter = int(np.logical_and(a.mask, b.mask).sum())
    union = int(np.logical_or(a.mask, b.mask).sum())
    return inter / union if union else 0.0


def render_drawing(pattern: BinaryPattern) -> CanonicalImage:
    """Catalog-style rendering: dark strokes on near-white paper."""
    img = np.full(pattern.mask.shape, DRAWING_BG, dtype=np.float32)
    img[pattern.mask == 1] = DRAWING_FG
    return CanonicalImage(img, provenance=pattern.provenance + "|drawing")


def _perturb_photo(pixels: np.ndarray, rng: np.random.Generator,
                   background: float) -> np.ndarray:
    """Small rotation (<=5 deg), sub-cell translation (<=3 px), 0-3 clutter
    strokes."""
    side = pixels.shape[0]
    angle = float(rng.uniform(-5.0, 5.0))
    dx = float(rng.uniform(-3.0, 3.0))
    dy = float(rng.uniform(-3.0, 3.0))
    m = cv2.getRotationMatrix2D((side / 2.0, side / 2.0), angle, 1.0)
    m[0, 2] += dx
    m[1, 2] += dy
    out = cv2.warpAffine(pixels, m, (side, side), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=background)
    n_clutter = int(rng.integers(0, 4))
    for _ in range(n_clutter):
        # faint thin lines, like writing seen in transmitted light
        pts = rng.integers(0, side, size=(int(rng.integers(2, 4)), 2)).astype(np.int32)
        shade = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.06, 0.12))
        overlay = np.zeros_like(out, dtype=np.uint8)
        cv2.polylines(overlay, [pts], False, 1, 1)
        out = out + shade * overlay.astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def gen_benchmark(out_dir, n_classes: int, photos_per_class: int,
                  image_side: int = 256, seed: int = 0,
                  cfg: SynthConfig | None = None):
    """Generate a self-contained corpus: per class one drawing, one plain
    synthetic reference and ``photos_per_class`` perturbed photographs.

    Manifest convention: drawings are train-split references (mining
    anchors), plain synthetics are test-split references (the retrieval
    index), photo 0 is the test-split query and further photos are
    train-split queries (the mining photo side).  The centered guide
    rectangle makes preprocess() an exact identity crop for the generated
    image size.

    Returns the manifest path; byte-identical output for identical
    arguments.
    """
    if n_classes < 2:
        raise ValueError(f"benchmark needs >= 2 classes, got {n_classes}")
    cfg = cfg or SynthConfig(background="sampled-paper")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    patterns: list[BinaryPattern] = []
    master = np.random.SeedSequence(seed)
    guide_side = image_side * 224.0 / 256.0
    guide = [round((image_side - guide_side) / 2.0, 4),
             round((image_side - guide_side) / 2.0, 4),
             round(guide_side, 4), round(guide_side, 4)]

    for ci in range(n_classes):
        class_id = f"class{ci:04d}"
        child = master.spawn(1)[0]
        rng = np.random.default_rng(child)
        pattern = random_pattern(image_side, rng, provenance=class_id)
        attempts = 0
        while any(pattern_iou(pattern, p) >= 0.9 for p in patterns):
            attempts += 1
            if attempts > 50:
                raise RuntimeError(f"cannot find a distinct pattern for {class_id}")
            pattern = random_pattern(image_side, rng, provenance=class_id)
        patterns.append(pattern)

        draw_path = out_dir / f"{class_id}_drawing.png"
        save_image(draw_path, render_drawing(pattern).pixels)
        records.append({"image_path": draw_path.name, "class_id": class_id,
                        "domain": "drawing", "split": "train",
                        "role": "reference", "guide_rect": guide})

        ref_path = out_dir / f"{class_id}_reference.png"
        save_image(ref_path, plain_synthetic(pattern).pixels)
        records.append({"image_path": ref_path.name, "class_id": class_id,
                        "domain": "synthetic", "split": "test",
                        "role": "reference", "guide_rect": guide})

        for pi in range(photos_per_class):
            photo_seed = int(rng.integers(0, 2 ** 31 - 1))
            base = randomized_synthetic(pattern, cfg, photo_seed)
            px = _perturb_photo(np.array(base.pixels), rng, cfg.background_value)
            photo_path = out_dir / f"{class_id}_photo{pi}.png"
            save_image(photo_path, px)
            records.append({"image_path": photo_path.name, "class_id": class_id,
                            "domain": "photograph",
                            "split": "test" if pi == 0 else "train",
                            "role": "query", "guide_rect": guide})

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path
