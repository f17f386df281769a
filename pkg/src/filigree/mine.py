"""Spatially verified triplet mining and adapter training.

Positives pair each drawing-side local feature with its best cross-domain
match when the match lands within a spatial threshold tau; the hardest
negative for an anchor is the globally most similar feature over all
photographs of other classes.  Features are adapted by a trainable affine
transform followed by renormalization, trained with a clipped triplet loss
(exact analytic gradients, finite-difference checkable) and a self-contained
Adam optimizer.

Mining is vectorized per anchor cell; training reduces mini-batches in a
fixed canonical order so runs are bit-reproducible for a given seed.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .extract import (FeaturePyramid, ScaleSet, extract_pyramid,
                      extract_query_map, load_image, preprocess)
from .featmap import FeatureMap, FormatError
from .match import _best_per_cell, _candidates, _grid_positions

TRIP_MAGIC = b"TRIP"
ADPT_MAGIC = b"ADPT"
BINARY_VERSION = 1


class MiningError(Exception):
    """Raised when mining or training cannot proceed (no data)."""


@dataclass(frozen=True)
class MiningConfig:
    """Thresholds and schedule for triplet mining.

    ``tau_cells`` is the positive-match spatial threshold in query-grid cell
    units (tau_cells / grid_width in normalized coordinates); ``lam`` the
    triplet-loss margin parameter; ``remine_every`` the number of epochs
    between re-mining rounds.
    """

    tau_cells: float = 3.0
    lam: float = 1.0
    scales: ScaleSet = field(default_factory=ScaleSet)
    remine_every: int = 1

    def __post_init__(self):
        if self.tau_cells < 0:
            raise ValueError(f"tau_cells must be >= 0, got {self.tau_cells}")
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.remine_every < 1:
            raise ValueError("remine_every must be >= 1")


@dataclass(frozen=True)
class ElementRef:
    """Provenance of one mined feature: source image, cell and scale."""

    image: str
    scale_id: int
    row: int
    col: int


@dataclass(frozen=True)
class PositivePair:
    anchor_cell: tuple[int, int]
    matched_scale: int
    matched_cell: tuple[int, int]
    fs: float
    distance: float  # normalized units


@dataclass(frozen=True)
class HardNegative:
    image_index: int
    scale_id: int
    cell: tuple[int, int]
    fs: float
    feature: np.ndarray


@dataclass(frozen=True)
class TripletBatch:
    """Parallel (anchor, positive, negative) feature arrays with provenance."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    provenance: tuple[tuple[ElementRef, ElementRef, ElementRef], ...] = ()

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.anchors, dtype=np.float32))
        p = np.ascontiguousarray(np.asarray(self.positives, dtype=np.float32))
        n = np.ascontiguousarray(np.asarray(self.negatives, dtype=np.float32))
        if not (a.shape == p.shape == n.shape) or a.ndim != 2:
            raise ValueError(
                f"triplet arrays must share shape (K, D): {a.shape}, {p.shape}, {n.shape}")
        if self.provenance and len(self.provenance) != a.shape[0]:
            raise ValueError("provenance length does not match batch size")
        for name, arr in (("anchors", a), ("positives", p), ("negatives", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]


@dataclass(frozen=True)
class AdapterParams:
    """Affine feature adapter (weight, bias) plus its Adam optimizer state."""

    weight: np.ndarray
    bias: np.ndarray
    m_weight: np.ndarray
    v_weight: np.ndarray
    m_bias: np.ndarray
    v_bias: np.ndarray
    step: int = 0

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weight, dtype=np.float32))
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight must be square, got {w.shape}")
        d = w.shape[0]
        arrays = {"weight": w}
        for name, shape in (("bias", (d,)), ("m_weight", (d, d)),
                            ("v_weight", (d, d)), ("m_bias", (d,)),
                            ("v_bias", (d,))):
            arr = np.ascontiguousarray(
                np.asarray(getattr(self, name), dtype=np.float32))
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arrays[name] = arr
        for name, arr in arrays.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in adapter {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "AdapterParams":
        return cls(weight=np.eye(dim, dtype=np.float32),
                   bias=np.zeros(dim, dtype=np.float32),
                   m_weight=np.zeros((dim, dim), dtype=np.float32),
                   v_weight=np.zeros((dim, dim), dtype=np.float32),
                   m_bias=np.zeros(dim, dtype=np.float32),
                   v_bias=np.zeros(dim, dtype=np.float32))


def _adapter_forward(X: np.ndarray, params: AdapterParams):
    """f' = normalize(W f + b) per row, in float64; zero rows stay zero."""
    X64 = X.astype(np.float64)
    live = np.linalg.norm(X64, axis=1) > 0.0
    G = X64 @ params.weight.astype(np.float64).T + params.bias.astype(np.float64)
    norms = np.linalg.norm(G, axis=1)
    ok = live & (norms > 0.0)
    safe = np.where(ok, norms, 1.0)
    F = np.where(ok[:, None], G / safe[:, None], 0.0)
    return F, norms, ok


def apply_adapter(fmap: FeatureMap, params: AdapterParams) -> FeatureMap:
    """Apply the affine adapter to every cell and renormalize.

    Cells that were zero in the input remain zero (blank regions never
    acquire the bias).
    """
    if fmap.dim != params.dim:
        raise ValueError(f"map dim {fmap.dim} != adapter dim {params.dim}")
    X = fmap.data.reshape(-1, fmap.dim)
    F, _, ok = _adapter_forward(X, params)
    out = F.astype(np.float32).reshape(fmap.data.shape)
    mask = (~ok).reshape(fmap.height, fmap.width)
    return FeatureMap(out, scale_id=fmap.scale_id,
                      orientation_id=fmap.orientation_id, zero_mask=mask)


def apply_adapter_pyramid(pyr: FeaturePyramid, params: AdapterParams) -> FeaturePyramid:
    return FeaturePyramid(tuple(apply_adapter(m, params) for m in pyr.maps),
                          pyr.orientation_id, image_ref=pyr.image_ref)


def mine_positives(drawing: FeatureMap, photo_pyramid: FeaturePyramid,
                   cfg: MiningConfig) -> list[PositivePair]:
    """Best cross-domain match per nonzero drawing cell, kept when close.

    A pair is kept when the normalized distance between the drawing cell
    center and the matched cell center is <= tau_cells / drawing_grid_width
    (so tau = 0 keeps exactly the matches landing on the identical
    normalized center).  Both maps are expected to be in the same (adapted)
    feature space.
    """
    if drawing.dim != photo_pyramid.dim:
        raise ValueError(f"drawing dim {drawing.dim} != pyramid dim {photo_pyramid.dim}")
    h, w = drawing.height, drawing.width
    tau_norm = cfg.tau_cells / w
    Q = drawing.unit().reshape(-1, drawing.dim)
    live = np.abs(Q).max(axis=1) > 0.0
    _, sids, rows, cols, us, vs = _candidates(photo_pyramid)
    qr, qc, qu, qv = _grid_positions(h, w)
    best, m = _best_per_cell(Q, (h, w), photo_pyramid)

    dist = np.hypot(us[best] - qu, vs[best] - qv)
    keep = live & (dist <= tau_norm)
    pairs = []
    for i in np.nonzero(keep)[0]:
        b = best[i]
        pairs.append(PositivePair(
            anchor_cell=(int(qr[i]), int(qc[i])),
            matched_scale=int(sids[b]),
            matched_cell=(int(rows[b]), int(cols[b])),
            fs=float(m[i]),
            distance=float(dist[i])))
    return pairs


def mine_hard_negative(anchor, other_class_pyramids) -> HardNegative:
    """Globally most similar feature over every cell/scale/image.

    Ties are broken by image order in the given list, then by
    (scale_id, row, col) lexicographic order.
    """
    pyramids = list(other_class_pyramids)
    if not pyramids:
        raise ValueError("hard-negative mining needs at least one candidate pyramid")
    q = np.asarray(anchor, dtype=np.float32).ravel()
    norm = np.linalg.norm(q)
    qh = q / norm if norm > 0 else q
    best = None  # (neg fs, image_index, flat index)
    for img_idx, pyr in enumerate(pyramids):
        if pyr.dim != q.shape[0]:
            raise ValueError(f"pyramid {img_idx} dim {pyr.dim} != anchor dim {q.shape[0]}")
        R, sids, rows, cols, _, _ = _candidates(pyr)
        sims = R @ qh
        j = int(np.argmax(sims))  # first max == (scale, row, col) lex order
        if best is None or sims[j] > best[0]:
            best = (float(sims[j]), img_idx, j, int(sids[j]), int(rows[j]),
                    int(cols[j]), R[j].copy())
    fs, img_idx, _, sid, r, c, vec = best
    return HardNegative(image_index=img_idx, scale_id=sid, cell=(r, c),
                        fs=fs, feature=vec)


def _cos_with_grads(A: np.ndarray, B: np.ndarray):
    """Row-wise cosine of (K, D) float64 arrays plus partials dA, dB."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na > 0) & (nb > 0)
    sa = np.where(na > 0, na, 1.0)
    sb = np.where(nb > 0, nb, 1.0)
    Ah = A / sa[:, None]
    Bh = B / sb[:, None]
    s = np.where(ok, np.einsum("ij,ij->i", Ah, Bh), 0.0)
    dA = np.where(ok[:, None], (Bh - s[:, None] * Ah) / sa[:, None], 0.0)
    dB = np.where(ok[:, None], (Ah - s[:, None] * Bh) / sb[:, None], 0.0)
    return s, dA, dB


def triplet_loss(batch: TripletBatch, lam: float = 1.0):
    """Clipped triplet loss and its exact analytic gradients.

    loss = sum_k max(1 - lam, s(a_k, n_k)) - sum_k min(lam, s(a_k, p_k))
    with s the cosine similarity.  Gradients are returned for every batch
    feature (anchors receive contributions from both terms) and are zero
    inside the clipped regions.
    """
    if len(batch) == 0:
        raise ValueError("empty triplet batch")
    A = batch.anchors.astype(np.float64)
    P = batch.positives.astype(np.float64)
    N = batch.negatives.astype(np.float64)

    s_pos, dpos_a, dpos_p = _cos_with_grads(A, P)
    s_neg, dneg_a, dneg_n = _cos_with_grads(A, N)

    loss = float(np.sum(np.maximum(1.0 - lam, s_neg))
                 - np.sum(np.minimum(lam, s_pos)))

    pos_active = (s_pos < lam)[:, None]
    neg_active = (s_neg > 1.0 - lam)[:, None]
    grad_a = np.where(neg_active, dneg_a, 0.0) - np.where(pos_active, dpos_a, 0.0)
    grad_p = -np.where(pos_active, dpos_p, 0.0)
    grad_n = np.where(neg_active, dneg_n, 0.0)
    return loss, (grad_a, grad_p, grad_n)


def _adapter_backward(X: np.ndarray, params: AdapterParams, norms, F, ok,
                      dF: np.ndarray):
    """Chain dL/df' back through normalize(W f + b) to (dW, db)."""
    safe = np.where(ok, norms, 1.0)
    inner = np.einsum("ij,ij->i", dF, F)
    dG = np.where(ok[:, None], (dF - inner[:, None] * F) / safe[:, None], 0.0)
    dW = dG.T @ X.astype(np.float64)
    db = dG.sum(axis=0)
    return dW, db


def adapter_triplet_loss(batch: TripletBatch, params: AdapterParams,
                         lam: float = 1.0):
    """Triplet loss of the adapted batch and its gradient w.r.t. (W, b).

    The forward pass adapts all three feature groups with
    normalize(W f + b); the backward pass chains the exact triplet-loss
    gradients through the renormalization.  Returns (loss, dW, db), both
    gradients in float64.
    """
    if len(batch) == 0:
        raise ValueError("empty triplet batch")
    groups = [batch.anchors, batch.positives, batch.negatives]
    fwd = [_adapter_forward(X, params) for X in groups]
    A, P, N = fwd[0][0], fwd[1][0], fwd[2][0]
    s_pos, dpos_a, dpos_p = _cos_with_grads(A, P)
    s_neg, dneg_a, dneg_n = _cos_with_grads(A, N)
    loss = float(np.sum(np.maximum(1.0 - lam, s_neg))
                 - np.sum(np.minimum(lam, s_pos)))
    pos_active = (s_pos < lam)[:, None]
    neg_active = (s_neg > 1.0 - lam)[:, None]
    dFs = [np.where(neg_active, dneg_a, 0.0) - np.where(pos_active, dpos_a, 0.0),
           -np.where(pos_active, dpos_p, 0.0),
           np.where(neg_active, dneg_n, 0.0)]
    dW = np.zeros((params.dim, params.dim), dtype=np.float64)
    db = np.zeros(params.dim, dtype=np.float64)
    for X, (F, norms, ok), dF in zip(groups, fwd, dFs):
        gW, gb = _adapter_backward(X, params, norms, F, ok, dF)
        dW += gW
        db += gb
    return loss, dW, db


def adam_step(params: AdapterParams, grad_weight, grad_bias, lr: float,
              betas: tuple[float, float] = (0.9, 0.99),
              eps: float = 1e-8) -> AdapterParams:
    """One bias-corrected Adam update; returns new params, state advanced.

    Non-finite gradients refuse the step: the error is raised and the given
    params remain valid and unchanged.
    """
    gw = np.asarray(grad_weight, dtype=np.float64)
    gb = np.asarray(grad_bias, dtype=np.float64)
    if gw.shape != params.weight.shape or gb.shape != params.bias.shape:
        raise ValueError("gradient shapes do not match adapter parameters")
    if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
        raise ValueError("non-finite gradients: step refused")
    b1, b2 = betas
    t = params.step + 1
    m_w = b1 * params.m_weight.astype(np.float64) + (1 - b1) * gw
    v_w = b2 * params.v_weight.astype(np.float64) + (1 - b2) * gw * gw
    m_b = b1 * params.m_bias.astype(np.float64) + (1 - b1) * gb
    v_b = b2 * params.v_bias.astype(np.float64) + (1 - b2) * gb * gb
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_w = params.weight.astype(np.float64) - lr * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
    new_b = params.bias.astype(np.float64) - lr * (m_b / c1) / (np.sqrt(v_b / c2) + eps)
    return AdapterParams(weight=new_w.astype(np.float32),
                         bias=new_b.astype(np.float32),
                         m_weight=m_w.astype(np.float32),
                         v_weight=v_w.astype(np.float32),
                         m_bias=m_b.astype(np.float32),
                         v_bias=v_b.astype(np.float32),
                         step=t)


class _TrainCorpus:
    """Raw (pre-adapter) feature caches for the train split of a manifest."""

    def __init__(self, records, extractor, scales: ScaleSet):
        self.drawings: dict[str, list[tuple[str, FeatureMap]]] = {}
        self.photos: dict[str, list[tuple[str, FeaturePyramid]]] = {}
        for rec in records:
            if getattr(rec, "split", None) != "train":
                continue
            domain = getattr(rec, "domain", None)
            if domain not in ("drawing", "photograph"):
                continue
            raw = load_image(rec.image_path)
            img = preprocess(raw, getattr(rec, "guide_rect", None),
                             provenance=str(rec.image_path))
            if domain == "drawing":
                fmap = extract_query_map(img, extractor, scales)
                self.drawings.setdefault(rec.class_id, []).append(
                    (str(rec.image_path), fmap))
            else:
                pyr = extract_pyramid(img, extractor, scales, orientation_id=0)
                self.photos.setdefault(rec.class_id, []).append(
                    (str(rec.image_path), pyr))
        self.classes = sorted(set(self.drawings) & set(self.photos))


def _mine_triplets(corpus: _TrainCorpus, params: AdapterParams,
                   cfg: MiningConfig) -> TripletBatch:
    """Re-mine all triplets under the current adapter; raw features returned."""
    adapted_draw = {c: [(p, apply_adapter(m, params)) for p, m in v]
                    for c, v in corpus.drawings.items() if c in corpus.classes}
    adapted_photo = {c: [(p, apply_adapter_pyramid(pyr, params)) for p, pyr in v]
                     for c, v in corpus.photos.items() if c in corpus.classes}

    # one flat candidate pool over all adapted photo cells, tagged by class
    pool_feats, pool_class, pool_sid, pool_row, pool_col, pool_img = \
        [], [], [], [], [], []
    pool_paths: list[str] = []
    raw_photo_cells = []
    for ci, cls in enumerate(corpus.classes):
        for (path, apyr), (_, rpyr) in zip(adapted_photo[cls], corpus.photos[cls]):
            R, sids, rows, cols, _, _ = _candidates(apyr)
            pool_feats.append(R)
            pool_class.append(np.full(len(sids), ci, dtype=np.int64))
            pool_sid.append(sids)
            pool_row.append(rows)
            pool_col.append(cols)
            pool_img.append(np.full(len(sids), len(pool_paths), dtype=np.int64))
            pool_paths.append(path)
            for m in rpyr.maps:
                raw_photo_cells.append(m.data.reshape(-1, m.dim))
    pool = np.concatenate(pool_feats)
    pool_class = np.concatenate(pool_class)
    pool_sid = np.concatenate(pool_sid)
    pool_row = np.concatenate(pool_row)
    pool_col = np.concatenate(pool_col)
    pool_img = np.concatenate(pool_img)
    pool_raw = np.concatenate(raw_photo_cells)

    anchors_raw, anchors_adapted, anchor_refs, anchor_class = [], [], [], []
    positives_raw, positive_refs = [], []
    for ci, cls in enumerate(corpus.classes):
        for (dpath, dmap_a), (_, dmap_raw) in zip(adapted_draw[cls],
                                                  corpus.drawings[cls]):
            for pidx, (ppath, ppyr_a) in enumerate(adapted_photo[cls]):
                rpyr = corpus.photos[cls][pidx][1]
                for pair in mine_positives(dmap_a, ppyr_a, cfg):
                    r, c = pair.anchor_cell
                    anchors_raw.append(dmap_raw.data[r, c])
                    anchors_adapted.append(dmap_a.data[r, c])
                    anchor_refs.append(ElementRef(dpath, dmap_raw.scale_id, r, c))
                    anchor_class.append(ci)
                    mr, mc = pair.matched_cell
                    raw_map = rpyr.maps[pair.matched_scale]
                    positives_raw.append(raw_map.data[mr, mc])
                    positive_refs.append(ElementRef(ppath, pair.matched_scale, mr, mc))

    if not anchors_raw:
        return TripletBatch(anchors=np.zeros((0, params.dim), np.float32),
                            positives=np.zeros((0, params.dim), np.float32),
                            negatives=np.zeros((0, params.dim), np.float32))

    A = np.stack(anchors_adapted).astype(np.float32)
    anchor_class = np.asarray(anchor_class)
    # chunked argmax keeps the anchors x pool similarity matrix bounded
    chunk = 256
    neg_idx = np.empty(len(A), dtype=np.int64)
    sims_buf = np.empty((chunk, pool.shape[0]), dtype=np.float32)
    for start in range(0, len(A), chunk):
        stop = min(start + chunk, len(A))
        sims = np.matmul(A[start:stop], pool.T, out=sims_buf[:stop - start])
        sims[pool_class[None, :] == anchor_class[start:stop, None]] = -2.0
        neg_idx[start:stop] = np.argmax(sims, axis=1)
        # first max == pool (image, scale, cell) order

    negatives_raw = pool_raw[neg_idx]
    negative_refs = [ElementRef(pool_paths[pool_img[j]], int(pool_sid[j]),
                                int(pool_row[j]), int(pool_col[j]))
                     for j in neg_idx]
    prov = tuple(zip(anchor_refs, positive_refs, negative_refs))
    return TripletBatch(anchors=np.stack(anchors_raw),
                        positives=np.stack(positives_raw),
                        negatives=negatives_raw.copy(),
                        provenance=prov)


def mine_manifest(records, extractor, cfg: MiningConfig,
                  params: AdapterParams | None = None) -> TripletBatch:
    """Mine all triplets from a manifest's train split under an adapter.

    Identity adapter (raw features) when ``params`` is None.
    """
    corpus = _TrainCorpus(records, extractor, cfg.scales)
    if len(corpus.classes) < 2:
        raise MiningError(
            f"mining needs >= 2 classes with both a drawing and a photograph, "
            f"found {len(corpus.classes)}")
    if params is None:
        params = AdapterParams.identity(extractor.dim)
    return _mine_triplets(corpus, params, cfg)


def train_adapter(train_records, extractor, cfg: MiningConfig, epochs: int,
                  lr: float = 1e-5, seed: int = 0, batch_size: int = 256):
    """Train the affine adapter on a manifest's train split.

    Per epoch: triplets are (re-)mined under the current adapter every
    ``cfg.remine_every`` epochs, then consumed in shuffled mini-batches;
    parameter gradients are normalized by mini-batch size before the Adam
    update.  Returns (final params, per-epoch mean triplet loss).
    Deterministic for a fixed seed.
    """
    corpus = _TrainCorpus(train_records, extractor, cfg.scales)
    if len(corpus.classes) < 2:
        raise MiningError(
            f"training needs >= 2 classes with both a drawing and a photograph, "
            f"found {len(corpus.classes)}")
    params = AdapterParams.identity(extractor.dim)
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    batch: TripletBatch | None = None
    trained_any = False
    for epoch in range(epochs):
        if batch is None or epoch % cfg.remine_every == 0:
            batch = _mine_triplets(corpus, params, cfg)
        k = len(batch)
        if k == 0:
            warnings.warn(f"epoch {epoch}: no positives mined, epoch skipped")
            curve.append(float("nan"))
            continue
        order = rng.permutation(k)
        total, seen = 0.0, 0
        for start in range(0, k, batch_size):
            sel = order[start:start + batch_size]
            sub = TripletBatch(anchors=batch.anchors[sel],
                               positives=batch.positives[sel],
                               negatives=batch.negatives[sel])
            loss, dW, db = adapter_triplet_loss(sub, params, cfg.lam)
            params = adam_step(params, dW / len(sel), db / len(sel), lr)
            total += loss
            seen += len(sel)
        curve.append(total / seen)
        trained_any = True
    if not trained_any:
        raise MiningError("no positives mined in any epoch; training failed")
    return params, curve


def write_triplets(batch: TripletBatch, path) -> None:
    """Serialize a triplet batch ("TRIP" binary with provenance records)."""
    k, d = batch.anchors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", TRIP_MAGIC, BINARY_VERSION, k, d))
        prov = batch.provenance or tuple(
            (ElementRef("", 0, 0, 0),) * 3 for _ in range(k))
        for i in range(k):
            for arr in (batch.anchors, batch.positives, batch.negatives):
                fh.write(np.ascontiguousarray(arr[i], dtype="<f4").tobytes())
            for ref in prov[i]:
                enc = ref.image.encode("utf-8")
                fh.write(struct.pack("<H", len(enc)))
                fh.write(enc)
                fh.write(struct.pack("<III", ref.scale_id, ref.row, ref.col))


def read_triplets(path) -> TripletBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sIII")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated TRIP header")
    magic, version, k, d = head.unpack_from(raw)
    if magic != TRIP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported TRIP version {version}")
    pos = head.size
    vecs = np.zeros((k, 3, d), dtype=np.float32)
    prov = []
    for i in range(k):
        for j in range(3):
            vecs[i, j] = np.frombuffer(raw, dtype="<f4", count=d, offset=pos)
            pos += 4 * d
        refs = []
        for _ in range(3):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            image = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            sid, r, c = struct.unpack_from("<III", raw, pos)
            pos += 12
            refs.append(ElementRef(image, sid, r, c))
        prov.append(tuple(refs))
    return TripletBatch(anchors=vecs[:, 0], positives=vecs[:, 1],
                        negatives=vecs[:, 2], provenance=tuple(prov))


def write_adapter(params: AdapterParams, path) -> None:
    """Serialize adapter params + Adam state ("ADPT" binary)."""
    d = params.dim
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", ADPT_MAGIC, BINARY_VERSION, d, params.step))
        for arr in (params.weight, params.bias, params.m_weight,
                    params.v_weight, params.m_bias, params.v_bias):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_adapter(path) -> AdapterParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sIII")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated ADPT header")
    magic, version, d, step = head.unpack_from(raw)
    if magic != ADPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported ADPT version {version}")
    sizes = [d * d, d, d * d, d * d, d, d]
    expected = head.size + 4 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    pos = head.size
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=pos))
        pos += 4 * n
    return AdapterParams(weight=arrays[0].reshape(d, d), bias=arrays[1],
                         m_weight=arrays[2].reshape(d, d),
                         v_weight=arrays[3].reshape(d, d),
                         m_bias=arrays[4], v_bias=arrays[5], step=step)


def write_loss_curve(curve, path) -> None:
    """Emit the per-epoch loss curve as tab-separated text."""
    with open(path, "w") as fh:
        fh.write("epoch\tloss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i}\t{v:.10g}\n")
