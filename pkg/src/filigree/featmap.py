"""Dense feature-grid types, normalization and similarity primitives.

A feature map is an H x W grid of D-dimensional local descriptors with a
fixed coordinate convention: cell centers live in normalized [0, 1]^2
coordinates so that distances are comparable between grids of different
sizes.  All descriptor data is stored as float32; score accumulations are
done in float64 by the callers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

ROTATION_DEGREES = (0, 90, 180, 270)


class FormatError(Exception):
    """Raised when a binary payload does not match its declared format."""


@dataclass(frozen=True)
class GridPosition:
    """Normalized position inside a feature grid, u horizontal, v vertical."""

    u: float
    v: float

    def __post_init__(self):
        if not (0.0 <= self.u <= 1.0 and 0.0 <= self.v <= 1.0):
            raise ValueError(f"position ({self.u}, {self.v}) outside [0,1]^2")


def encode_orientation(rotation_index: int, flip: bool) -> int:
    """Pack a quarter-turn rotation index (0-3) and a flip flag into an id 0-7."""
    if rotation_index not in (0, 1, 2, 3):
        raise ValueError(f"rotation index {rotation_index} not in 0..3")
    return rotation_index + 4 * int(bool(flip))


def decode_orientation(orientation_id: int) -> tuple[int, bool]:
    """Inverse of :func:`encode_orientation`."""
    if not 0 <= orientation_id <= 7:
        raise ValueError(f"orientation id {orientation_id} not in 0..7")
    return orientation_id % 4, orientation_id >= 4


class FeatureMap:
    """An immutable height x width grid of D-dimensional cell descriptors.

    Parameters
    ----------
    data : np.ndarray
        Array of shape (height, width, dim); stored as float32 and made
        read-only.
    scale_id : int
        Index of this map inside its scale set (0 for single-scale maps).
    orientation_id : int
        Orientation hypothesis (0-7) of the image the map was extracted from.
    zero_mask : np.ndarray, optional
        Boolean (height, width) mask flagging cells whose descriptor was zero
        at normalization time.
    """

    __slots__ = ("data", "scale_id", "orientation_id", "zero_mask", "_unit")

    def __init__(self, data, scale_id: int = 0, orientation_id: int = 0,
                 zero_mask=None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"feature map data must be 3-D (h, w, dim), got shape {arr.shape}")
        h, w, d = arr.shape
        if h < 1 or w < 1 or d < 1:
            raise ValueError(f"feature map dimensions must be >= 1, got {arr.shape}")
        if not 0 <= orientation_id <= 7:
            raise ValueError(f"orientation id {orientation_id} not in 0..7")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.data = arr
        self.scale_id = int(scale_id)
        self.orientation_id = int(orientation_id)
        if zero_mask is not None:
            zero_mask = np.ascontiguousarray(np.asarray(zero_mask, dtype=bool))
            if zero_mask.shape != (h, w):
                raise ValueError("zero mask shape does not match the grid")
            zero_mask.setflags(write=False)
        self.zero_mask = zero_mask
        self._unit = None

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def unit(self) -> np.ndarray:
        """Per-cell L2-normalized copy of the data (zero cells stay zero).

        Cached; safe because the underlying data is read-only.
        """
        if self._unit is None:
            flat = self.data.reshape(-1, self.dim).astype(np.float32)
            norms = np.linalg.norm(flat, axis=1)
            safe = np.where(norms > 0.0, norms, 1.0)
            out = flat / safe[:, None]
            out = out.reshape(self.data.shape)
            out.setflags(write=False)
            self._unit = out
        return self._unit

    def cell(self, row: int, col: int) -> np.ndarray:
        return self.data[row, col]

    def __repr__(self):
        return (f"FeatureMap({self.height}x{self.width}x{self.dim}, "
                f"scale={self.scale_id}, orientation={self.orientation_id})")


def normalize_features(fmap: FeatureMap) -> FeatureMap:
    """Return a copy of ``fmap`` with every nonzero cell scaled to unit L2 norm.

    Zero cells are left at zero and flagged in the returned map's
    ``zero_mask``.  Non-finite input values are rejected with a diagnostic
    naming the offending cell.
    """
    data = fmap.data
    finite = np.isfinite(data).all(axis=2)
    if not finite.all():
        r, c = np.argwhere(~finite)[0]
        raise ValueError(f"non-finite value in feature map at cell ({r}, {c})")
    flat = data.reshape(-1, fmap.dim)
    norms = np.linalg.norm(flat, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = (flat / safe[:, None]).astype(np.float32).reshape(data.shape)
    mask = zero.reshape(fmap.height, fmap.width)
    return FeatureMap(out, scale_id=fmap.scale_id,
                      orientation_id=fmap.orientation_id, zero_mask=mask)


def cosine(a, b) -> float:
    """Cosine similarity a.b / (|a||b|); 0.0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("cosine requires finite inputs")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cell_center(row: int, col: int, height: int, width: int) -> GridPosition:
    """Normalized center of grid cell (row, col) in an height x width grid."""
    if not (0 <= row < height and 0 <= col < width):
        raise ValueError(f"cell ({row}, {col}) outside {height}x{width} grid")
    return GridPosition(u=(col + 0.5) / width, v=(row + 0.5) / height)


_HEADER = struct.Struct("<4sIIIIII")


def write_fmap(fmap: FeatureMap, path) -> None:
    """Serialize a feature map in the FMAP binary format.

    Layout: magic "FMAP", then version, height, width, dim, scale_id,
    orientation_id as little-endian uint32, then the cell data as
    little-endian float32 in (row, col, channel) order.
    """
    header = _HEADER.pack(FMAP_MAGIC, FMAP_VERSION, fmap.height, fmap.width,
                          fmap.dim, fmap.scale_id, fmap.orientation_id)
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_fmap(path) -> FeatureMap:
    """Read a feature map written by :func:`write_fmap`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated FMAP header")
    magic, version, h, w, d, scale_id, orientation_id = _HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported FMAP version {version}")
    expected = h * w * d * 4
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, d)
    return FeatureMap(data, scale_id=scale_id, orientation_id=orientation_id)
