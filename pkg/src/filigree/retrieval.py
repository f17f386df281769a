"""Reference index construction, two-stage one-shot retrieval, evaluation.

Stage 1 ranks every reference class with the cheap order-less LocalSim
similarity (maximized over the 8 stored orientations); stage 2 re-scores the
top-N candidates with the spatially consistent matching score and splices
the re-ranked head ahead of the untouched stage-1 tail, so accuracy@K stays
defined for K > N.  The index stores adapted features when an adapter is
supplied at build time; queries then apply the same adapter.

Indexes are immutable after build and safe to query concurrently; results
are deterministic regardless of evaluation order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extract import (CanonicalImage, Extractor, FeaturePyramid, ScaleSet,
                      extract_baseline_map, extract_pyramid, extract_query_map,
                      load_image, preprocess)
from .featmap import FeatureMap, read_fmap, write_fmap
from .match import localsim, score_oriented
from .mine import AdapterParams, apply_adapter, apply_adapter_pyramid, \
    read_adapter, write_adapter

INDEX_VERSION = 1
DEFAULT_SIGMA_CELLS = 2.0
# sketch-retrieval preset: larger spatial tolerance, expressed for the
# 24-cell grid of 384-px inputs
SBIR_SIGMA_CELLS = 4.0

DOMAINS = ("drawing", "synthetic", "photograph")
SPLITS = ("train", "val", "test")
ROLES = ("reference", "query")


class FingerprintMismatch(Exception):
    """Query-side extractor does not match the one the index was built with."""


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    class_id: str
    domain: str
    split: str
    role: str
    guide_rect: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.guide_rect is not None:
            rect = tuple(float(v) for v in self.guide_rect)
            if len(rect) != 4:
                raise ValueError("guide_rect must be (x, y, w, h)")
            object.__setattr__(self, "guide_rect", rect)


def read_manifest(path) -> list[ManifestRecord]:
    """Read a JSONL dataset manifest; image paths resolve relative to it."""
    base = Path(path).parent
    records = []
    seen = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid manifest record: {e}")
            img = obj["image_path"]
            resolved = str((base / img) if not Path(img).is_absolute() else Path(img))
            if resolved in seen:
                raise ValueError(f"{path}:{line_no}: duplicate image path {img!r}")
            seen.add(resolved)
            records.append(ManifestRecord(
                image_path=resolved,
                class_id=str(obj["class_id"]),
                domain=obj["domain"],
                split=obj["split"],
                role=obj["role"],
                guide_rect=tuple(obj["guide_rect"]) if obj.get("guide_rect") else None))
    return records


def load_canonical(rec: ManifestRecord) -> CanonicalImage:
    raw = load_image(rec.image_path)
    return preprocess(raw, rec.guide_rect, provenance=rec.image_path)


@dataclass(frozen=True)
class IndexConfig:
    scales: ScaleSet = field(default_factory=ScaleSet)
    sigma_cells: float = DEFAULT_SIGMA_CELLS
    base_grid: int = 14


@dataclass(frozen=True)
class ReferenceEntry:
    """All stored features of one reference image: 8 orientation pyramids
    for the matching score plus 8 baseline maps for stage 1."""

    class_id: str
    image_ref: str
    pyramids: tuple[FeaturePyramid, ...]
    base_maps: tuple[FeatureMap, ...]

    def __post_init__(self):
        if len(self.pyramids) != 8 or len(self.base_maps) != 8:
            raise ValueError("reference entry needs 8 orientations")


@dataclass(frozen=True)
class ReferenceIndex:
    entries: tuple[ReferenceEntry, ...]
    fingerprint: dict
    config: IndexConfig
    adapter: AdapterParams | None = None
    adapter_id: str | None = None
    skipped: tuple[str, ...] = ()

    @property
    def class_ids(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.class_id not in seen:
                seen.append(e.class_id)
        return seen


@dataclass(frozen=True)
class RankEntry:
    class_id: str
    score: float
    stage: int
    orientation_id: int | None = None


@dataclass(frozen=True)
class RankedResult:
    entries: tuple[RankEntry, ...]
    stage1: tuple[tuple[str, float], ...]
    query_ref: str
    stage1_seconds: float
    stage2_seconds: float

    def rank_of(self, class_id: str) -> int | None:
        for i, e in enumerate(self.entries, 1):
            if e.class_id == class_id:
                return i
        return None


def extractor_fingerprint(extractor: Extractor) -> dict:
    fp = {"kind": extractor.kind, "stride": int(extractor.stride),
          "dim": int(extractor.dim)}
    model_hash = getattr(extractor, "fingerprint_hash", None)
    if model_hash:
        fp["model_sha256"] = model_hash
    return fp


def _check_fingerprint(index: ReferenceIndex, extractor: Extractor) -> None:
    fp = extractor_fingerprint(extractor)
    if fp != index.fingerprint:
        raise FingerprintMismatch(
            f"extractor {fp} does not match index {index.fingerprint}")


def build_index(records, extractor: Extractor, config: IndexConfig | None = None,
                adapter: AdapterParams | None = None,
                adapter_id: str | None = None,
                domains=None, split: str | None = None) -> ReferenceIndex:
    """Extract and store 8-orientation pyramids + baseline maps per reference.

    ``records`` are manifest records; only role == "reference" entries are
    used, optionally filtered by domain set and split.  Unreadable images
    are recorded in ``index.skipped`` and skipped; extractor shape errors
    abort the build.
    """
    config = config or IndexConfig()
    refs = [r for r in records if r.role == "reference"]
    if domains is not None:
        refs = [r for r in refs if r.domain in set(domains)]
    if split is not None:
        refs = [r for r in refs if r.split == split]
    if not refs:
        raise ValueError("no reference records to index")
    if adapter is not None and adapter.dim != extractor.dim:
        raise ValueError(f"adapter dim {adapter.dim} != extractor dim {extractor.dim}")

    entries = []
    skipped = []
    for rec in refs:
        try:
            img = load_canonical(rec)
        except (FileNotFoundError, OSError) as e:
            skipped.append(f"{rec.image_path}: {e}")
            continue
        pyramids = []
        base_maps = []
        for o in range(8):
            pyr = extract_pyramid(img, extractor, config.scales, orientation_id=o)
            base = extract_baseline_map(img, extractor, orientation_id=o,
                                        base_grid=config.base_grid)
            if adapter is not None:
                pyr = apply_adapter_pyramid(pyr, adapter)
                base = apply_adapter(base, adapter)
            pyramids.append(pyr)
            base_maps.append(base)
        entries.append(ReferenceEntry(class_id=rec.class_id,
                                      image_ref=rec.image_path,
                                      pyramids=tuple(pyramids),
                                      base_maps=tuple(base_maps)))
    if not entries:
        raise ValueError("all reference images were unreadable")
    return ReferenceIndex(entries=tuple(entries),
                          fingerprint=extractor_fingerprint(extractor),
                          config=config, adapter=adapter,
                          adapter_id=adapter_id, skipped=tuple(skipped))


def save_index(index: ReferenceIndex, out_dir) -> None:
    """Persist an index as index.json plus FMAP files (deterministic bytes)."""
    out_dir = Path(out_dir)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    meta_entries = []
    for i, entry in enumerate(index.entries):
        key = f"e{i:05d}"
        for o in range(8):
            for m in entry.pyramids[o].maps:
                write_fmap(m, maps_dir / f"{key}_o{o}_s{m.scale_id}.fmap")
            write_fmap(entry.base_maps[o], maps_dir / f"{key}_o{o}_base.fmap")
        meta_entries.append({"key": key, "class_id": entry.class_id,
                             "image_ref": entry.image_ref})
    if index.adapter is not None:
        write_adapter(index.adapter, out_dir / "adapter.adpt")
    meta = {
        "version": INDEX_VERSION,
        "fingerprint": index.fingerprint,
        "adapter_id": index.adapter_id,
        "has_adapter": index.adapter is not None,
        "config": {
            "grid_sizes": list(index.config.scales.grid_sizes),
            "query_grid": index.config.scales.query_grid,
            "sigma_cells": index.config.sigma_cells,
            "base_grid": index.config.base_grid,
        },
        "skipped": list(index.skipped),
        "entries": meta_entries,
    }
    (out_dir / "index.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_index(index_dir) -> ReferenceIndex:
    index_dir = Path(index_dir)
    meta_path = index_dir / "index.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no index at {index_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != INDEX_VERSION:
        raise ValueError(f"unsupported index version {meta.get('version')}")
    cfg = meta["config"]
    config = IndexConfig(
        scales=ScaleSet(tuple(cfg["grid_sizes"]), cfg["query_grid"]),
        sigma_cells=float(cfg["sigma_cells"]), base_grid=int(cfg["base_grid"]))
    maps_dir = index_dir / "maps"
    entries = []
    for ent in meta["entries"]:
        key = ent["key"]
        pyramids = []
        base_maps = []
        for o in range(8):
            maps = [read_fmap(maps_dir / f"{key}_o{o}_s{s}.fmap")
                    for s in range(len(config.scales.grid_sizes))]
            pyramids.append(FeaturePyramid(tuple(maps), orientation_id=o,
                                           image_ref=ent["image_ref"]))
            base_maps.append(read_fmap(maps_dir / f"{key}_o{o}_base.fmap"))
        entries.append(ReferenceEntry(class_id=ent["class_id"],
                                      image_ref=ent["image_ref"],
                                      pyramids=tuple(pyramids),
                                      base_maps=tuple(base_maps)))
    adapter = None
    if meta.get("has_adapter"):
        adapter = read_adapter(index_dir / "adapter.adpt")
    return ReferenceIndex(entries=tuple(entries), fingerprint=meta["fingerprint"],
                          config=config, adapter=adapter,
                          adapter_id=meta.get("adapter_id"),
                          skipped=tuple(meta.get("skipped", ())))


def _query_base_map(query_img: CanonicalImage, index: ReferenceIndex,
                    extractor: Extractor) -> FeatureMap:
    base = extract_baseline_map(query_img, extractor, base_grid=index.config.base_grid)
    if index.adapter is not None:
        base = apply_adapter(base, index.adapter)
    return base


def stage1_rank(query_img: CanonicalImage, index: ReferenceIndex,
                extractor: Extractor) -> list[tuple[str, float]]:
    """Rank all classes by LocalSim, maximized over stored orientations.

    Returns (class_id, score) sorted by descending score; ties keep the
    index class order.
    """
    _check_fingerprint(index, extractor)
    qbase = _query_base_map(query_img, index, extractor)
    class_scores: dict[str, float] = {}
    class_order: dict[str, int] = {}
    for entry in index.entries:
        best = max(localsim(qbase, bm) for bm in entry.base_maps)
        if entry.class_id not in class_order:
            class_order[entry.class_id] = len(class_order)
        prev = class_scores.get(entry.class_id)
        if prev is None or best > prev:
            class_scores[entry.class_id] = best
    ranked = sorted(class_scores.items(),
                    key=lambda kv: (-kv[1], class_order[kv[0]]))
    return ranked


def rerank(query_img: CanonicalImage, index: ReferenceIndex,
           extractor: Extractor, n: int | None = None,
           sigma_cells: float | None = None) -> RankedResult:
    """Two-stage ranking: stage-1 shortlist, matching-score rerank of top N.

    ``n`` = None reranks every class.  Entries after position N keep the
    stage-1 ordering and scores.
    """
    _check_fingerprint(index, extractor)
    if n is not None and n <= 0:
        raise ValueError(f"rerank N must be >= 1, got {n}")
    sigma = index.config.sigma_cells if sigma_cells is None else float(sigma_cells)

    t0 = time.perf_counter()
    stage1 = stage1_rank(query_img, index, extractor)
    t1 = time.perf_counter()

    n_eff = len(stage1) if n is None else min(n, len(stage1))
    query_map = extract_query_map(query_img, extractor, index.config.scales)
    if index.adapter is not None:
        query_map = apply_adapter(query_map, index.adapter)

    by_class: dict[str, list[ReferenceEntry]] = {}
    for entry in index.entries:
        by_class.setdefault(entry.class_id, []).append(entry)

    rescored = []
    for pos, (class_id, _) in enumerate(stage1[:n_eff]):
        best_total, best_o = None, None
        for entry in by_class[class_id]:
            bd, o = score_oriented(query_map, entry.pyramids, sigma)
            if best_total is None or bd.total > best_total:
                best_total, best_o = bd.total, o
        rescored.append((class_id, best_total, best_o, pos))
    rescored.sort(key=lambda t: (-t[1], t[3]))
    t2 = time.perf_counter()

    entries = [RankEntry(class_id=c, score=s, stage=2, orientation_id=o)
               for c, s, o, _ in rescored]
    entries.extend(RankEntry(class_id=c, score=s, stage=1)
                   for c, s in stage1[n_eff:])
    return RankedResult(entries=tuple(entries), stage1=tuple(stage1),
                        query_ref=query_img.provenance,
                        stage1_seconds=t1 - t0, stage2_seconds=t2 - t1)


@dataclass(frozen=True)
class QueryOutcome:
    image_path: str
    true_class: str
    rank: int | None
    top1: str
    stage1_seconds: float
    stage2_seconds: float


@dataclass(frozen=True)
class EvalReport:
    n_queries: int
    n_errors: int
    accuracy: dict[int, float]
    curve: tuple[float, ...]  # accuracy at K = 1..n_classes
    per_query: tuple[QueryOutcome, ...]
    errors: tuple[str, ...]
    stage1_mean: float
    stage1_p95: float
    stage2_mean: float
    stage2_p95: float
    rerank_n: int | None


def evaluate(query_records, index: ReferenceIndex, extractor: Extractor,
             n: int | None, k_list, sigma_cells: float | None = None) -> EvalReport:
    """Accuracy@K of the two-stage pipeline over a set of query records.

    Queries whose class is absent from the index are counted as errors and
    reported separately; accuracy is over the evaluable queries.
    """
    k_list = sorted(set(int(k) for k in k_list))
    if any(k < 1 for k in k_list):
        raise ValueError("accuracy K values must be >= 1")
    indexed_classes = set(index.class_ids)
    outcomes = []
    errors = []
    for rec in query_records:
        if rec.class_id not in indexed_classes:
            errors.append(rec.image_path)
            continue
        img = load_canonical(rec)
        result = rerank(img, index, extractor, n=n, sigma_cells=sigma_cells)
        outcomes.append(QueryOutcome(
            image_path=rec.image_path, true_class=rec.class_id,
            rank=result.rank_of(rec.class_id),
            top1=result.entries[0].class_id,
            stage1_seconds=result.stage1_seconds,
            stage2_seconds=result.stage2_seconds))
    if not outcomes:
        raise ValueError("no evaluable queries")

    n_classes = len(indexed_classes)
    ranks = np.array([o.rank if o.rank is not None else n_classes + 1
                      for o in outcomes])
    curve = tuple(float(np.mean(ranks <= k)) for k in range(1, n_classes + 1))
    accuracy = {k: float(np.mean(ranks <= min(k, n_classes))) for k in k_list}
    s1 = np.array([o.stage1_seconds for o in outcomes])
    s2 = np.array([o.stage2_seconds for o in outcomes])
    return EvalReport(
        n_queries=len(outcomes), n_errors=len(errors), accuracy=accuracy,
        curve=curve, per_query=tuple(outcomes), errors=tuple(errors),
        stage1_mean=float(s1.mean()), stage1_p95=float(np.percentile(s1, 95)),
        stage2_mean=float(s2.mean()), stage2_p95=float(np.percentile(s2, 95)),
        rerank_n=n)
