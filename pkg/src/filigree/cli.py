"""Command-line surface.

Subcommands: extract, synth, bench-gen, index-build, query, eval, mine,
train-adapter, heatmap.  Failures print one machine-readable JSON object to
stderr with a distinct exit code per error category:

  2 usage, 3 I/O, 4 binary/file format, 5 extractor fingerprint mismatch,
  6 invalid argument, 7 no data to mine/train, 8 references skipped.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import extract as ex
from . import mine as mn
from . import report as rp
from . import retrieval as rt
from . import synth as sy
from .featmap import FeatureMap, FormatError, normalize_features, write_fmap
from .match import heatmap_query, heatmap_reference, score_oriented
from .onnxlite import NeuralExtractor

EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_FINGERPRINT = 5
EXIT_INVALID = 6
EXIT_NO_DATA = 7
EXIT_SKIPPED = 8


def _fail(code: int, name: str, detail: str) -> int:
    sys.stderr.write(json.dumps({"error": name, "code": code,
                                 "detail": detail}) + "\n")
    return code


def _extractor(args) -> ex.Extractor:
    if getattr(args, "model", None):
        return NeuralExtractor(args.model, getattr(args, "sidecar", None))
    return ex.HandcraftedExtractor()


def _scales(args) -> ex.ScaleSet:
    return ex.ScaleSet()


def _parse_rect(text):
    if not text:
        return None
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"guide rect must be x,y,w,h, got {text!r}")
    return tuple(parts)


def _load_canonical(args) -> ex.CanonicalImage:
    raw = ex.load_image(args.image)
    return ex.preprocess(raw, _parse_rect(getattr(args, "guide", None)),
                         provenance=str(args.image))


def _rerank_n(value):
    if value in (None, "", "all", "inf"):
        return None
    n = int(value)
    return None if n < 0 else n


def cmd_extract(args) -> int:
    extractor = _extractor(args)
    scales = _scales(args)
    img = _load_canonical(args)
    grid = args.grid or scales.query_grid
    side = grid * extractor.stride
    oriented = ex.orient_image(img, args.orientation)
    px = ex._resize(oriented.pixels, side, side)
    raw = extractor.extract(px)
    fmap = normalize_features(FeatureMap(raw, orientation_id=args.orientation))
    write_fmap(fmap, args.out)
    print(f"wrote {args.out}: {fmap.height}x{fmap.width}x{fmap.dim}")
    return 0


def cmd_synth(args) -> int:
    px = ex.load_image(args.pattern)
    gray = px if px.ndim == 2 else px.mean(axis=2)
    mask = (gray < 0.5) if args.invert else (gray > 0.5)
    pattern = sy.BinaryPattern(mask.astype(np.uint8), provenance=str(args.pattern))
    if args.mode == "plain":
        img = sy.plain_synthetic(pattern)
    else:
        cfg = sy.SynthConfig(blur_sigma=args.blur_sigma,
                             noise_low=args.noise_low,
                             noise_high=args.noise_high,
                             background_value=args.background_value)
        img = sy.randomized_synthetic(pattern, cfg, args.seed)
    ex.save_image(args.out, img.pixels)
    print(f"wrote {args.out}")
    return 0


def cmd_bench_gen(args) -> int:
    manifest = sy.gen_benchmark(args.out, args.classes, args.photos,
                                image_side=args.side, seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_index_build(args) -> int:
    records = rt.read_manifest(args.manifest)
    extractor = _extractor(args)
    adapter = mn.read_adapter(args.adapter) if args.adapter else None
    config = rt.IndexConfig(scales=_scales(args), sigma_cells=args.sigma_cells)
    domains = args.domains.split(",") if args.domains else None
    index = rt.build_index(records, extractor, config, adapter=adapter,
                           adapter_id=args.adapter, domains=domains,
                           split=args.split)
    rt.save_index(index, args.out)
    print(f"indexed {len(index.entries)} references "
          f"({len(index.class_ids)} classes) -> {args.out}")
    if index.skipped:
        return _fail(EXIT_SKIPPED, "references-skipped",
                     "; ".join(index.skipped))
    return 0


def cmd_query(args) -> int:
    index = rt.load_index(args.index)
    extractor = _extractor(args)
    img = _load_canonical(args)
    result = rt.rerank(img, index, extractor, n=_rerank_n(args.rerank_n),
                       sigma_cells=args.sigma_cells)
    print("rank\tclass_id\tscore\tstage\torientation")
    for i, e in enumerate(result.entries[:args.topk], 1):
        orient = "" if e.orientation_id is None else str(e.orientation_id)
        print(f"{i}\t{e.class_id}\t{e.score:.6f}\t{e.stage}\t{orient}")
    sys.stderr.write(f"stage1 {result.stage1_seconds * 1e3:.1f} ms, "
                     f"stage2 {result.stage2_seconds * 1e3:.1f} ms\n")
    return 0


def cmd_eval(args) -> int:
    records = rt.read_manifest(args.manifest)
    index = rt.load_index(args.index)
    extractor = _extractor(args)
    queries = [r for r in records if r.role == "query" and r.split == args.split]
    k_list = [int(k) for k in args.k.split(",")]
    report = rt.evaluate(queries, index, extractor, n=_rerank_n(args.rerank_n),
                         k_list=k_list, sigma_cells=args.sigma_cells)
    out_dir = args.out or (Path(args.index) / "report")
    paths = rp.write_eval_report(report, out_dir)
    print(rp.format_eval_summary(report), end="")
    print(f"report written to {paths['summary'].parent}")
    return 0


def cmd_mine(args) -> int:
    records = rt.read_manifest(args.manifest)
    extractor = _extractor(args)
    adapter = mn.read_adapter(args.adapter) if args.adapter else None
    cfg = mn.MiningConfig(tau_cells=args.tau_cells, scales=_scales(args))
    batch = mn.mine_manifest(records, extractor, cfg, adapter)
    if len(batch) == 0:
        return _fail(EXIT_NO_DATA, "no-positives", "no positive pairs mined")
    mn.write_triplets(batch, args.out)
    print(f"mined {len(batch)} triplets -> {args.out}")
    return 0


def cmd_train_adapter(args) -> int:
    records = rt.read_manifest(args.manifest)
    extractor = _extractor(args)
    cfg = mn.MiningConfig(tau_cells=args.tau_cells, scales=_scales(args),
                          remine_every=args.remine_every)
    params, curve = mn.train_adapter(records, extractor, cfg,
                                     epochs=args.epochs, lr=args.lr,
                                     seed=args.seed)
    mn.write_adapter(params, args.out)
    if args.curve:
        mn.write_loss_curve(curve, args.curve)
    losses = ", ".join(f"{v:.4f}" for v in curve)
    print(f"trained {args.epochs} epochs (loss per epoch: {losses})")
    print(f"wrote {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    extractor = _extractor(args)
    scales = _scales(args)
    img = _load_canonical(args)
    ref_raw = ex.load_image(args.reference)
    ref = ex.preprocess(ref_raw, _parse_rect(args.ref_guide),
                        provenance=str(args.reference))
    query_map = ex.extract_query_map(img, extractor, scales)
    if args.adapter:
        params = mn.read_adapter(args.adapter)
        query_map = mn.apply_adapter(query_map, params)
    pyramids = [ex.extract_pyramid(ref, extractor, scales, orientation_id=o)
                for o in range(8)]
    if args.adapter:
        pyramids = [mn.apply_adapter_pyramid(p, params) for p in pyramids]
    bd, orient = score_oriented(query_map, pyramids, args.sigma_cells)
    grid = heatmap_query(bd) if args.target == "query" else heatmap_reference(bd)
    out = Path(args.out)
    rp.save_heatmap_png(grid, bd.total, out.with_suffix(".png"))
    rp.write_heatmap_sidecar(bd, out.with_suffix(".tsv"))
    print(f"score {bd.total:.4f} at orientation {orient}; "
          f"wrote {out.with_suffix('.png')} and {out.with_suffix('.tsv')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filigree",
        description="One-shot cross-domain watermark recognition by "
                    "spatially consistent dense feature matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model(p):
        p.add_argument("--model", help="interchange model file (neural extractor); "
                                       "default is the handcrafted test extractor")
        p.add_argument("--sidecar", help="model metadata sidecar (default: "
                                         "model path with .json suffix)")

    p = sub.add_parser("extract", help="extract one feature map to an FMAP file")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--orientation", type=int, default=0)
    p.add_argument("--guide", help="guide rectangle x,y,w,h in raw pixels")
    add_model(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="render a synthetic reference from a pattern")
    p.add_argument("--pattern", required=True, help="binary pattern image")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("plain", "randomized"), default="plain")
    p.add_argument("--invert", action="store_true",
                   help="strokes are dark on light (catalog drawings)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur-sigma", type=float, default=1.5)
    p.add_argument("--noise-low", type=float, default=0.05)
    p.add_argument("--noise-high", type=float, default=0.35)
    p.add_argument("--background-value", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench-gen", help="generate a synthetic benchmark corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--photos", type=int, default=2)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_gen)

    p = sub.add_parser("index-build", help="build and persist a reference index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--domains", help="comma-separated domain filter")
    p.add_argument("--split", help="split filter (e.g. test)")
    p.add_argument("--adapter", help="ADPT adapter file to bake into the index")
    p.add_argument("--sigma-cells", type=float, default=rt.DEFAULT_SIGMA_CELLS)
    add_model(p)
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("query", help="rank reference classes for one image")
    p.add_argument("--index", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--guide")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--rerank-n", default=None,
                   help="candidates to rerank (default: all)")
    p.add_argument("--sigma-cells", type=float, default=None)
    add_model(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="accuracy@K evaluation over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--rerank-n", default=None)
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--split", default="test")
    p.add_argument("--sigma-cells", type=float, default=None)
    p.add_argument("--out", help="report directory (default: <index>/report)")
    add_model(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mine", help="mine spatially verified triplets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-cells", type=float, default=3.0)
    p.add_argument("--adapter")
    add_model(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train-adapter", help="train the affine feature adapter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau-cells", type=float, default=3.0)
    p.add_argument("--remine-every", type=int, default=1)
    p.add_argument("--curve", help="loss curve output (TSV)")
    add_model(p)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("heatmap", help="render a contribution heatmap for a pair")
    p.add_argument("--image", required=True, help="query image")
    p.add_argument("--reference", required=True, help="reference image")
    p.add_argument("--guide", help="query guide rectangle x,y,w,h")
    p.add_argument("--ref-guide", help="reference guide rectangle x,y,w,h")
    p.add_argument("--target", choices=("query", "reference"), default="query")
    p.add_argument("--sigma-cells", type=float, default=rt.DEFAULT_SIGMA_CELLS)
    p.add_argument("--adapter")
    p.add_argument("--out", required=True, help="output prefix (.png/.tsv)")
    add_model(p)
    p.set_defaults(func=cmd_heatmap)

    return parser


def cli_run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        return _fail(EXIT_IO, "io-error", str(e))
    except OSError as e:
        return _fail(EXIT_IO, "io-error", str(e))
    except FormatError as e:
        return _fail(EXIT_FORMAT, "format-error", str(e))
    except rt.FingerprintMismatch as e:
        return _fail(EXIT_FINGERPRINT, "fingerprint-mismatch", str(e))
    except mn.MiningError as e:
        return _fail(EXIT_NO_DATA, "no-data", str(e))
    except (ValueError, NotImplementedError) as e:
        return _fail(EXIT_INVALID, "invalid-argument", str(e))


def main() -> None:
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
