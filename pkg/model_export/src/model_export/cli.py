"""Command line for the backbone export tool."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backbone-export",
        description="Truncate a classification backbone at a mid-level stage "
                    "and export it to the interchange format.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export a truncated backbone")
    p.add_argument("--out", required=True, help="output model file (.onnx)")
    p.add_argument("--layer", default="conv4",
                   choices=("conv3", "conv4", "conv5"))
    p.add_argument("--source", default="resnet18")
    p.add_argument("--checkpoint", help="local state-dict to load")
    p.add_argument("--seed", type=int, default=0,
                   help="init seed when no checkpoint is given")
    p.add_argument("--mean", default=None,
                   help="input normalization means r,g,b")
    p.add_argument("--std", default=None,
                   help="input normalization stds r,g,b")
    return parser


def _triple(text, default):
    if text is None:
        return default
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return vals


def cli_run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .export import IMAGENET_MEAN, IMAGENET_STD
    try:
        spec = ExportSpec(out_path=args.out, source=args.source,
                          layer=args.layer, checkpoint=args.checkpoint,
                          seed=args.seed,
                          normalize_mean=_triple(args.mean, IMAGENET_MEAN),
                          normalize_std=_triple(args.std, IMAGENET_STD))
        summary = export(spec)
    except (ExportError, ValueError, FileNotFoundError) as e:
        sys.stderr.write(f"export failed: {e}\n")
        return 1
    print(f"wrote {summary['model']} (+ sidecar {summary['sidecar']})")
    print(f"output shape {summary['output_shape']}, "
          f"dual-run max-abs {summary['validation_max_abs']:.2e}")
    return 0


def main() -> None:
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
