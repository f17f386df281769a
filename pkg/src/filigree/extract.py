"""Image preprocessing, orientation hypotheses and dense feature extraction.

The canonical pipeline maps a raw photograph plus a guiding rectangle to a
256 x 256 image, generates the eight right-angle orientation hypotheses for
reference images, and turns images into multi-scale grids of local
descriptors via a pluggable extractor: either a neural backbone loaded from
an interchange file (see :mod:`filigree.onnxlite`) or a deterministic
handcrafted extractor that lets the whole pipeline run without any neural
runtime.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import correlate

from .featmap import FeatureMap, decode_orientation, normalize_features

DEFAULT_GRID_SIZES = (16, 19, 22, 25, 28)
DEFAULT_QUERY_GRID = 22
DEFAULT_BASE_GRID = 14


@dataclass(frozen=True)
class CanonicalImage:
    """A preprocessed image: float32 pixels in [0, 1], grayscale or RGB."""

    pixels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValueError(f"pixels must be (H, W) or (H, W, 3), got {px.shape}")
        if px.size and (px.min() < -1e-6 or px.max() > 1 + 1e-6):
            raise ValueError("pixel values must lie in [0, 1]")
        px = np.ascontiguousarray(np.clip(px, 0.0, 1.0))
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def is_square(self) -> bool:
        return self.pixels.shape[0] == self.pixels.shape[1]

    def gray(self) -> np.ndarray:
        if self.pixels.ndim == 2:
            return self.pixels
        return self.pixels.mean(axis=2)


@dataclass(frozen=True)
class ScaleSet:
    """The reference grid sizes and the grid used on the query side."""

    grid_sizes: tuple[int, ...] = DEFAULT_GRID_SIZES
    query_grid: int = DEFAULT_QUERY_GRID

    def __post_init__(self):
        sizes = tuple(int(g) for g in self.grid_sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"grid sizes must be strictly increasing, got {sizes}")
        if self.query_grid not in sizes:
            raise ValueError(f"query grid {self.query_grid} not in {sizes}")
        object.__setattr__(self, "grid_sizes", sizes)

    def scale_id(self, grid: int) -> int:
        return self.grid_sizes.index(grid)


@dataclass(frozen=True)
class FeaturePyramid:
    """One FeatureMap per scale of one image under one orientation."""

    maps: tuple[FeatureMap, ...]
    orientation_id: int
    image_ref: str = ""

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise ValueError("pyramid must contain at least one map")
        sids = [m.scale_id for m in maps]
        if any(b <= a for a, b in zip(sids, sids[1:])):
            raise ValueError("pyramid maps must be sorted by scale_id")
        dims = {m.dim for m in maps}
        if len(dims) != 1:
            raise ValueError(f"pyramid maps disagree on dim: {sorted(dims)}")
        object.__setattr__(self, "maps", maps)

    @property
    def dim(self) -> int:
        return self.maps[0].dim


class Extractor:
    """Image -> dense feature grid. Concrete extractors declare stride/dim.

    For an input of side ``g * stride`` the output grid must be exactly
    ``g x g``.  Extractors are read-only after construction and safe to share
    between concurrent callers.
    """

    stride: int
    dim: int
    kind: str

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        """Return raw (unnormalized) features of shape (g, g, dim)."""
        raise NotImplementedError


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG into float32 [0, 1], RGB or grayscale."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = raw[:, :, ::-1]  # BGR -> RGB
    return np.ascontiguousarray(raw.astype(np.float32) / 255.0)


def save_image(path, pixels: np.ndarray) -> None:
    """Write float [0, 1] pixels as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    out = np.round(arr * 255.0).astype(np.uint8)
    if out.ndim == 3:
        out = out[:, :, ::-1]  # RGB -> BGR
    if not cv2.imwrite(str(path), out):
        raise IOError(f"cannot write image: {path}")


def _resize(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    if pixels.shape[1] == width and pixels.shape[0] == height:
        return pixels
    return cv2.resize(pixels, (width, height), interpolation=cv2.INTER_LINEAR)


def preprocess(raw: np.ndarray, guide_rect=None, crop_side: int = 256,
               rect_side: int = 224, provenance: str = "") -> CanonicalImage:
    """Map a raw image to the canonical square crop.

    The image is resized anisotropically so the guiding rectangle becomes a
    ``rect_side`` square, then a ``crop_side`` square centered on the
    rectangle center is cut out, padding with the image mean where the crop
    exceeds the resized image.  When ``guide_rect`` is None, the full image
    is the guide.

    Parameters
    ----------
    raw : np.ndarray
        (H, W) or (H, W, 3) pixels; integer arrays are scaled by 1/255.
    guide_rect : (x, y, w, h), optional
        Axis-aligned rectangle in raw pixel coordinates.
    """
    raw = np.asarray(raw)
    if np.issubdtype(raw.dtype, np.integer):
        raw = raw.astype(np.float32) / 255.0
    raw = raw.astype(np.float32, copy=False)
    ih, iw = raw.shape[:2]
    if guide_rect is None:
        guide_rect = (0.0, 0.0, float(iw), float(ih))
    x, y, w, h = (float(v) for v in guide_rect)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate guide rectangle {guide_rect}")
    if x < 0 or y < 0 or x + w > iw + 1e-6 or y + h > ih + 1e-6:
        raise ValueError(f"guide rectangle {guide_rect} outside {iw}x{ih} image")

    sx = rect_side / w
    sy = rect_side / h
    new_w = max(1, int(round(iw * sx)))
    new_h = max(1, int(round(ih * sy)))
    resized = _resize(raw, new_w, new_h)

    cx = (x + w / 2.0) * sx
    cy = (y + h / 2.0) * sy
    left = int(round(cx)) - crop_side // 2
    top = int(round(cy)) - crop_side // 2

    mean = resized.mean(axis=(0, 1))
    if resized.ndim == 3:
        out = np.empty((crop_side, crop_side, 3), dtype=np.float32)
        out[:] = mean[None, None, :]
    else:
        out = np.full((crop_side, crop_side), mean, dtype=np.float32)

    src_x0, src_y0 = max(left, 0), max(top, 0)
    src_x1, src_y1 = min(left + crop_side, new_w), min(top + crop_side, new_h)
    if src_x1 > src_x0 and src_y1 > src_y0:
        out[src_y0 - top:src_y1 - top, src_x0 - left:src_x1 - left] = \
            resized[src_y0:src_y1, src_x0:src_x1]
    out = np.clip(out, 0.0, 1.0)
    return CanonicalImage(out, provenance=provenance)


def orient_image(img: CanonicalImage, orientation_id: int) -> CanonicalImage:
    """Apply one of the 8 orientation hypotheses (lossless pixel permutation).

    The id encodes a counter-clockwise quarter-turn count (0-3) applied
    first, followed by an optional horizontal flip.
    """
    if not img.is_square():
        raise ValueError("orientation transforms require a square image")
    rot, flip = decode_orientation(orientation_id)
    px = np.rot90(img.pixels, k=rot)
    if flip:
        px = px[:, ::-1]
    tag = f"|orient={orientation_id}" if orientation_id else ""
    return CanonicalImage(np.ascontiguousarray(px),
                          provenance=img.provenance + tag)


def extract_pyramid(img: CanonicalImage, extractor: Extractor,
                    scales: ScaleSet, orientation_id: int = 0) -> FeaturePyramid:
    """Extract the multi-scale feature pyramid of an oriented image.

    For each grid size g the oriented image is resized to
    (g * stride) x (g * stride), run through the extractor and per-cell
    L2-normalized.
    """
    oriented = orient_image(img, orientation_id)
    maps = []
    for sid, g in enumerate(scales.grid_sizes):
        side = g * extractor.stride
        px = _resize(oriented.pixels, side, side)
        raw = extractor.extract(px)
        if raw.shape != (g, g, extractor.dim):
            raise ValueError(
                f"extractor produced grid {raw.shape}, expected "
                f"({g}, {g}, {extractor.dim}) for input side {side}")
        fmap = FeatureMap(raw, scale_id=sid, orientation_id=orientation_id)
        maps.append(normalize_features(fmap))
    return FeaturePyramid(tuple(maps), orientation_id, image_ref=oriented.provenance)


def extract_query_map(img: CanonicalImage, extractor: Extractor,
                      scales: ScaleSet) -> FeatureMap:
    """Extract the single query-side map at the query grid size."""
    g = scales.query_grid
    sid = scales.scale_id(g)
    side = g * extractor.stride
    px = _resize(img.pixels, side, side)
    raw = extractor.extract(px)
    if raw.shape != (g, g, extractor.dim):
        raise ValueError(
            f"extractor produced grid {raw.shape}, expected "
            f"({g}, {g}, {extractor.dim}) for input side {side}")
    return normalize_features(FeatureMap(raw, scale_id=sid, orientation_id=0))


def extract_baseline_map(img: CanonicalImage, extractor: Extractor,
                         orientation_id: int = 0,
                         base_grid: int = DEFAULT_BASE_GRID) -> FeatureMap:
    """Extract the global-baseline map: resize to 256, center-crop 224.

    Used by the AvgPool / Concat / LocalSim similarities and the stage-1
    pre-filter; with the default stride 16 the result is a 14 x 14 grid.
    """
    oriented = orient_image(img, orientation_id)
    crop_side = base_grid * extractor.stride
    full_side = int(round(crop_side * 256 / 224))
    px = _resize(oriented.pixels, full_side, full_side)
    off = (full_side - crop_side) // 2
    px = px[off:off + crop_side, off:off + crop_side]
    raw = extractor.extract(np.ascontiguousarray(px))
    if raw.shape != (base_grid, base_grid, extractor.dim):
        raise ValueError(
            f"extractor produced grid {raw.shape}, expected "
            f"({base_grid}, {base_grid}, {extractor.dim})")
    fmap = FeatureMap(raw, scale_id=0, orientation_id=orientation_id)
    return normalize_features(fmap)


def _cell_index(n_pixels: int, grid: int) -> np.ndarray:
    # partition pixel rows/cols into `grid` contiguous cells
    return (np.arange(n_pixels) * grid) // n_pixels


def _gradient_cells(gray: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell 8-bin gradient-orientation histogram + mean-intensity contrast.

    Bin b covers angles [-pi + b*pi/4, -pi + (b+1)*pi/4), accumulating
    gradient magnitude; channel 8 is the cell mean intensity minus the mean
    over the 3x3 cell neighborhood, so featureless regions (and constant
    images) yield exactly-zero cells.  Both parts are equivariant under
    quarter-turn rotations of the image.
    """
    h, w = gray.shape
    gy, gx = np.gradient(gray.astype(np.float64))
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = np.floor((ang + np.pi) / (np.pi / 4.0)).astype(np.int64) % 8

    rows = _cell_index(h, grid)
    cols = _cell_index(w, grid)
    cell = rows[:, None] * grid + cols[None, :]

    flat_idx = cell * 8 + bins
    hist = np.bincount(flat_idx.ravel(), weights=mag.ravel(),
                       minlength=grid * grid * 8)
    hist = hist.reshape(grid, grid, 8)

    sums = np.bincount(cell.ravel(), weights=gray.astype(np.float64).ravel(),
                       minlength=grid * grid)
    counts = np.bincount(cell.ravel(), minlength=grid * grid).astype(np.float64)
    means = (sums / counts).reshape(grid, grid)
    kernel = np.ones((3, 3))
    neigh_sum = correlate(means, kernel, mode="constant", cval=0.0)
    neigh_cnt = correlate(np.ones_like(means), kernel, mode="constant", cval=0.0)
    intensity = means - neigh_sum / neigh_cnt

    out = np.concatenate([hist, intensity[:, :, None]], axis=2)
    return out.astype(np.float32)


def handcrafted_test_extract(img: CanonicalImage, grid: int) -> FeatureMap:
    """Deterministic 9-channel local descriptor grid, L2-normalized per cell.

    Lets the matching, mining and retrieval pipeline (and the test suite)
    run end to end without any neural runtime.
    """
    if not img.is_square():
        raise ValueError("handcrafted extraction requires a square image")
    if grid > img.side:
        raise ValueError(f"grid {grid} larger than image side {img.side}")
    if grid < 1:
        raise ValueError("grid must be >= 1")
    raw = _gradient_cells(img.gray(), grid)
    return normalize_features(FeatureMap(raw))


class HandcraftedExtractor(Extractor):
    """Gradient-histogram extractor with backbone-like stride semantics."""

    def __init__(self, stride: int = 16):
        self.stride = int(stride)
        self.dim = 9
        self.kind = "handcrafted-test"

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        side = pixels.shape[0]
        if pixels.shape[0] != pixels.shape[1]:
            raise ValueError("extractor input must be square")
        if side % self.stride:
            raise ValueError(f"input side {side} not a multiple of stride {self.stride}")
        grid = side // self.stride
        gray = pixels if pixels.ndim == 2 else pixels.mean(axis=2)
        return _gradient_cells(gray, grid)
