"""Dense best-match search and the spatially consistent matching score.

For every local feature of the query grid, the single most similar feature
across every cell of every scale of a reference pyramid is found (exact
argmax, no approximate indexing).  Each match contributes
``fs * exp(-d^2 / (2 sigma^2))`` where ``fs`` is the cosine feature
similarity and ``d`` the distance between the normalized cell centers; the
image-level score is the sum over query cells.  Cell iteration is fully
vectorized, so one scoring call is data-parallel over query cells, and all
operations are pure and read-only over immutable inputs.

Also implements the three order-less global baselines (AvgPool, Concat,
LocalSim) and contribution heatmap grids.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .extract import FeaturePyramid
from .featmap import FeatureMap, GridPosition, cell_center

_TLS = threading.local()


def _scratch(name: str, shape: tuple[int, ...], dtype) -> np.ndarray:
    """Per-thread reusable work buffer (fresh large allocations are far more
    expensive than the arithmetic on them here).  Buffers never outlive one
    scoring call, so sharing per thread is safe."""
    pool = getattr(_TLS, "pool", None)
    if pool is None:
        pool = _TLS.pool = {}
    arr = pool.get(name)
    if arr is None or arr.shape != shape or arr.dtype != np.dtype(dtype):
        arr = pool[name] = np.empty(shape, dtype=dtype)
    return arr


@dataclass(frozen=True)
class MatchRecord:
    """One query cell's best match and its score contribution."""

    query_cell: tuple[int, int]
    query_pos: GridPosition
    matched_scale: int
    matched_cell: tuple[int, int]
    matched_pos: GridPosition
    fs: float
    sc: float
    contribution: float


class ScoreBreakdown:
    """Per-cell match data plus the total matching score.

    Match data is held in compact arrays (one entry per query cell in
    row-major order); :attr:`records` materializes them as
    :class:`MatchRecord` tuples on first access.
    """

    __slots__ = ("query_height", "query_width", "matched_scale", "matched_row",
                 "matched_col", "matched_u", "matched_v", "fs", "sc",
                 "contribution", "total", "sigma_cells", "orientation_id",
                 "_records")

    def __init__(self, query_height, query_width, matched_scale, matched_row,
                 matched_col, matched_u, matched_v, fs, sc, contribution,
                 sigma_cells, orientation_id):
        self.query_height = int(query_height)
        self.query_width = int(query_width)
        self.matched_scale = matched_scale
        self.matched_row = matched_row
        self.matched_col = matched_col
        self.matched_u = matched_u
        self.matched_v = matched_v
        self.fs = fs
        self.sc = sc
        self.contribution = contribution
        self.total = float(np.sum(contribution, dtype=np.float64))
        self.sigma_cells = float(sigma_cells)
        self.orientation_id = int(orientation_id)
        self._records = None

    def __len__(self):
        return self.query_height * self.query_width

    @property
    def records(self) -> tuple[MatchRecord, ...]:
        if self._records is None:
            w = self.query_width
            recs = []
            for i in range(len(self)):
                r, c = divmod(i, w)
                recs.append(MatchRecord(
                    query_cell=(r, c),
                    query_pos=cell_center(r, c, self.query_height, w),
                    matched_scale=int(self.matched_scale[i]),
                    matched_cell=(int(self.matched_row[i]), int(self.matched_col[i])),
                    matched_pos=GridPosition(float(self.matched_u[i]),
                                             float(self.matched_v[i])),
                    fs=float(self.fs[i]),
                    sc=float(self.sc[i]),
                    contribution=float(self.contribution[i]),
                ))
            self._records = tuple(recs)
        return self._records


def _candidates(pyr: FeaturePyramid):
    """Flatten a pyramid into parallel candidate arrays across all scales.

    Candidates are ordered by (scale_id, row, col), which doubles as the
    lexicographic tie-break order.  The result is cached on the (immutable)
    pyramid.
    """
    cached = getattr(pyr, "_cand_cache", None)
    if cached is not None:
        return cached
    mats, sids, rows, cols, us, vs = [], [], [], [], [], []
    for m in pyr.maps:
        h, w = m.height, m.width
        n = h * w
        mats.append(m.unit().reshape(n, m.dim))
        sids.append(np.full(n, m.scale_id, dtype=np.int64))
        rr, cc = np.divmod(np.arange(n, dtype=np.int64), w)
        rows.append(rr)
        cols.append(cc)
        us.append((cc.astype(np.float64) + 0.5) / w)
        vs.append((rr.astype(np.float64) + 0.5) / h)
    cached = (np.concatenate(mats), np.concatenate(sids), np.concatenate(rows),
              np.concatenate(cols), np.concatenate(us), np.concatenate(vs))
    object.__setattr__(pyr, "_cand_cache", cached)
    return cached


def _break_tie(sims_row, idx, qu, qv, us, vs, sids, rows, cols):
    d2 = (us[idx] - qu) ** 2 + (vs[idx] - qv) ** 2
    order = np.lexsort((cols[idx], rows[idx], sids[idx], d2))
    return idx[order[0]]


def _grid_positions(height: int, width: int):
    """Row-major cell coordinates and normalized centers for a grid."""
    n = height * width
    qr, qc = np.divmod(np.arange(n, dtype=np.int64), width)
    qu = (qc.astype(np.float64) + 0.5) / width
    qv = (qr.astype(np.float64) + 0.5) / height
    return qr, qc, qu, qv


@lru_cache(maxsize=64)
def _pairwise_d2(query_shape: tuple[int, int],
                 geometry: tuple[tuple[int, int, int], ...]) -> np.ndarray:
    """Squared center distances query cells x candidate cells.

    Depends only on the grid shapes, so it is cached per
    (query shape, pyramid geometry) and shared across scoring calls.
    """
    qh, qw = query_shape
    _, _, qu, qv = _grid_positions(qh, qw)
    us, vs = [], []
    for _, h, w in geometry:
        rr, cc = np.divmod(np.arange(h * w, dtype=np.int64), w)
        us.append((cc.astype(np.float64) + 0.5) / w)
        vs.append((rr.astype(np.float64) + 0.5) / h)
    cu = np.concatenate(us)
    cv = np.concatenate(vs)
    d2 = (qu[:, None] - cu[None, :]) ** 2 + (qv[:, None] - cv[None, :]) ** 2
    d2.setflags(write=False)
    return d2


def _pyramid_geometry(pyr: FeaturePyramid) -> tuple[tuple[int, int, int], ...]:
    return tuple((m.scale_id, m.height, m.width) for m in pyr.maps)


@lru_cache(maxsize=64)
def _nearest_candidate(query_shape: tuple[int, int],
                       geometry: tuple[tuple[int, int, int], ...]) -> np.ndarray:
    """Per query cell, the candidate minimizing (distance^2, concat order).

    This is the tie-break winner when every candidate ties (zero query
    cells); geometry-only, so precomputed once per grid combination.
    """
    d2 = _pairwise_d2(query_shape, geometry)
    out = np.argmin(d2, axis=1)  # first minimum == (scale, row, col) order
    out.setflags(write=False)
    return out


def _best_per_cell(Q: np.ndarray, query_shape: tuple[int, int],
                   pyr: FeaturePyramid):
    """Best candidate per query row with the full tie-break rule.

    Zero query rows (all similarities exactly zero) resolve through a cached
    geometry lookup.  Live rows whose exact maximum is shared by several
    candidates are resolved in one vectorized pass: minimal center distance,
    then first candidate in (scale, row, col) order, which is the candidate
    concatenation order.
    """
    geometry = _pyramid_geometry(pyr)
    cands = _candidates(pyr)
    R = cands[0]
    S = np.matmul(Q, R.T, out=_scratch("pair_S", (Q.shape[0], R.shape[0]),
                                       np.float32))
    m = S.max(axis=1)
    best = np.argmax(S, axis=1)

    live = np.abs(Q).max(axis=1) > 0.0
    if not live.all():
        dead = ~live
        best[dead] = _nearest_candidate(query_shape, geometry)[dead]

    eq = np.equal(S, m[:, None], out=_scratch("pair_eq", S.shape, bool))
    eq[~live] = False
    tied = np.nonzero(eq.sum(axis=1) > 1)[0]
    if tied.size:
        d2_full = _pairwise_d2(query_shape, geometry)
        n, block = S.shape
        t_count = tied.size
        key = _scratch("pair_key", (n, block), np.float64)[:t_count]
        np.take(d2_full, tied, axis=0, out=key)
        eqsub = _scratch("pair_eqsub", (n, block), bool)[:t_count]
        np.take(eq, tied, axis=0, out=eqsub)
        np.copyto(key, np.inf,
                  where=np.logical_not(
                      eqsub, out=_scratch("pair_not", (n, block), bool)[:t_count]))
        best[tied] = np.argmin(key, axis=1)
    return best, m


def best_match(query_feature, query_pos: GridPosition,
               pyr: FeaturePyramid) -> tuple[int, tuple[int, int], float]:
    """Most similar reference cell over every cell of every scale.

    Ties on the similarity are broken by smallest spatial distance to
    ``query_pos``, then by (scale_id, row, col) lexicographic order.

    Returns (matched scale_id, (row, col), cosine similarity).
    """
    q = np.asarray(query_feature, dtype=np.float32).ravel()
    if q.shape[0] != pyr.dim:
        raise ValueError(f"query dim {q.shape[0]} != pyramid dim {pyr.dim}")
    norm = np.linalg.norm(q)
    qh = q / norm if norm > 0 else q
    R, sids, rows, cols, us, vs = _candidates(pyr)
    sims = R @ qh
    m = sims.max()
    idx = np.nonzero(sims == m)[0]
    best = idx[0] if idx.size == 1 else _break_tie(
        sims, idx, query_pos.u, query_pos.v, us, vs, sids, rows, cols)
    return int(sids[best]), (int(rows[best]), int(cols[best])), float(sims[best])


def score_pair(query: FeatureMap, pyr: FeaturePyramid,
               sigma_cells: float) -> ScoreBreakdown:
    """Score a query map against one reference pyramid.

    ``sigma_cells`` is the spatial tolerance expressed in query-grid cell
    units; positions are compared in normalized [0, 1]^2 coordinates, so the
    Gaussian uses sigma = sigma_cells / query_grid_width.  Only each query
    cell's best match contributes.
    """
    if sigma_cells <= 0:
        raise ValueError(f"sigma_cells must be > 0, got {sigma_cells}")
    if query.dim != pyr.dim:
        raise ValueError(f"query dim {query.dim} != pyramid dim {pyr.dim}")
    h, w = query.height, query.width
    Q = query.unit().reshape(h * w, query.dim)
    _, sids, rows, cols, us, vs = _candidates(pyr)
    _, _, qu, qv = _grid_positions(h, w)
    best, m = _best_per_cell(Q, (h, w), pyr)

    fs = m.astype(np.float64)
    mu, mv = us[best], vs[best]
    d2 = (qu - mu) ** 2 + (qv - mv) ** 2
    sigma_norm = sigma_cells / w
    sc = np.exp(-d2 / (2.0 * sigma_norm * sigma_norm))
    contribution = fs * sc
    return ScoreBreakdown(
        query_height=h, query_width=w,
        matched_scale=sids[best], matched_row=rows[best], matched_col=cols[best],
        matched_u=mu, matched_v=mv, fs=fs, sc=sc, contribution=contribution,
        sigma_cells=sigma_cells, orientation_id=pyr.orientation_id)


def score_oriented(query: FeatureMap, pyramids,
                   sigma_cells: float) -> tuple[ScoreBreakdown, int]:
    """Score against all 8 orientation hypotheses, return the best.

    ``pyramids`` must contain exactly one pyramid per orientation id 0-7 and
    all must share the query's dim and one grid geometry (true for pyramids
    of one reference image).  Ties on the total are broken toward the
    smallest orientation id.

    All 8 hypotheses are scored through one similarity matrix; per-cell
    semantics (best match, tie rules, Gaussian weighting) are identical to
    :func:`score_pair` on each orientation separately.
    """
    if sigma_cells <= 0:
        raise ValueError(f"sigma_cells must be > 0, got {sigma_cells}")
    by_orient: dict[int, FeaturePyramid] = {}
    for p in pyramids:
        if p.orientation_id in by_orient:
            raise ValueError(f"duplicate orientation id {p.orientation_id}")
        by_orient[p.orientation_id] = p
    if sorted(by_orient) != list(range(8)):
        missing = sorted(set(range(8)) - set(by_orient))
        raise ValueError(f"missing orientation ids {missing}")
    geometry = _pyramid_geometry(by_orient[0])
    for o in range(8):
        if by_orient[o].dim != query.dim:
            raise ValueError(f"query dim {query.dim} != pyramid dim {by_orient[o].dim}")
        if _pyramid_geometry(by_orient[o]) != geometry:
            raise ValueError("orientation pyramids disagree on grid geometry")

    h, w = query.height, query.width
    n = h * w
    Q = query.unit().reshape(n, query.dim)
    per_orient = [_candidates(by_orient[o]) for o in range(8)]
    block = per_orient[0][0].shape[0]
    sids, rows, cols = per_orient[0][1], per_orient[0][2], per_orient[0][3]
    us, vs = per_orient[0][4], per_orient[0][5]

    cache_key = tuple(id(by_orient[o]) for o in range(8))
    cached = getattr(by_orient[0], "_stacked_cache", None)
    if cached is not None and cached[0] == cache_key:
        R = cached[1]
    else:
        R = np.concatenate([c[0] for c in per_orient])
        object.__setattr__(by_orient[0], "_stacked_cache", (cache_key, R))

    S2 = np.matmul(Q, R.T, out=_scratch("or_S", (n, 8 * block), np.float32))
    S = S2.reshape(n, 8, block)
    best = np.argmax(S, axis=2)
    m = np.take_along_axis(S, best[:, :, None], axis=2)[:, :, 0].copy()

    live = np.abs(Q).max(axis=1) > 0.0
    if not live.all():
        best[~live, :] = _nearest_candidate((h, w), geometry)[~live, None]

    eq = np.equal(S, m[:, :, None], out=_scratch("or_eq", S.shape, bool))
    eq[~live, :, :] = False
    ti, to = np.nonzero(eq.sum(axis=2) > 1)
    if ti.size:
        d2_full = _pairwise_d2((h, w), geometry)
        t_count = ti.size
        key = _scratch("or_key", (n * 8, block), np.float64)[:t_count]
        np.take(d2_full, ti, axis=0, out=key)
        eqsub = _scratch("or_eqsub", (n * 8, block), bool)[:t_count]
        np.take(eq.reshape(n * 8, block), ti * 8 + to, axis=0, out=eqsub)
        np.copyto(key, np.inf,
                  where=np.logical_not(
                      eqsub, out=_scratch("or_not", (n * 8, block), bool)[:t_count]))
        best[ti, to] = np.argmin(key, axis=1)

    _, _, qu, qv = _grid_positions(h, w)
    mu, mv = us[best], vs[best]
    d2 = (qu[:, None] - mu) ** 2 + (qv[:, None] - mv) ** 2
    sigma_norm = sigma_cells / w
    sc = np.exp(-d2 / (2.0 * sigma_norm * sigma_norm))
    fs = m.astype(np.float64)
    contribution = fs * sc  # (n, 8)
    totals = contribution.sum(axis=0, dtype=np.float64)
    winner = int(np.argmax(totals))  # first max: smallest orientation id

    sel = best[:, winner]
    bd = ScoreBreakdown(
        query_height=h, query_width=w,
        matched_scale=sids[sel], matched_row=rows[sel], matched_col=cols[sel],
        matched_u=mu[:, winner], matched_v=mv[:, winner],
        fs=fs[:, winner], sc=sc[:, winner],
        contribution=contribution[:, winner],
        sigma_cells=sigma_cells, orientation_id=winner)
    return bd, winner


def avgpool_sim(a: FeatureMap, b: FeatureMap) -> float:
    """Cosine similarity of the spatially average-pooled descriptors."""
    if a.dim != b.dim:
        raise ValueError(f"dim mismatch: {a.dim} vs {b.dim}")
    pa = a.data.mean(axis=(0, 1), dtype=np.float64)
    pb = b.data.mean(axis=(0, 1), dtype=np.float64)
    return _cos64(pa, pb)


def concat_sim(a: FeatureMap, b: FeatureMap) -> float:
    """Cosine similarity of the row-major concatenation of all cells."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _cos64(a.data.ravel().astype(np.float64),
                  b.data.ravel().astype(np.float64))


def localsim(a: FeatureMap, b: FeatureMap) -> float:
    """Mean over cells of the per-cell cosine similarity."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    ua = a.unit().reshape(-1, a.dim)
    ub = b.unit().reshape(-1, b.dim)
    dots = np.einsum("ij,ij->i", ua.astype(np.float64), ub.astype(np.float64))
    return float(dots.mean())


def _cos64(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def heatmap_query(bd: ScoreBreakdown) -> np.ndarray:
    """Grid of score contributions at the query cells, shape (H, W)."""
    return np.asarray(bd.contribution, dtype=np.float64).reshape(
        bd.query_height, bd.query_width)


def heatmap_reference(bd: ScoreBreakdown, shape=None) -> np.ndarray:
    """Contributions splatted onto the matched reference positions.

    Matched cells live at five different scales, so their normalized centers
    are splatted onto one common grid (the query grid shape by default),
    summing on collision.  The grid sum equals ``bd.total`` exactly.
    """
    if shape is None:
        shape = (bd.query_height, bd.query_width)
    h, w = shape
    grid = np.zeros((h, w), dtype=np.float64)
    r = np.minimum((np.asarray(bd.matched_v) * h).astype(np.int64), h - 1)
    c = np.minimum((np.asarray(bd.matched_u) * w).astype(np.int64), w - 1)
    np.add.at(grid, (r, c), bd.contribution)
    return grid
