"""Report rendering: heatmap PNGs, accuracy curves, delimited tables.

Every figure-producing path also writes the underlying numbers as
tab-separated text so results stay auditable without re-running.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .match import ScoreBreakdown
from .retrieval import EvalReport

# Fig-style convention: a cell is fully red once it contributes >= 1% of the
# total score, fully blue at zero contribution.
HOT_FRACTION = 0.01


def save_heatmap_png(grid: np.ndarray, total: float, path) -> None:
    """Render a contribution grid; blue at 0, red at >= 1% of the total."""
    vmax = max(total * HOT_FRACTION, 1e-12)
    plt.imsave(str(path), np.asarray(grid, dtype=np.float64), cmap="jet",
               vmin=0.0, vmax=vmax)


def write_heatmap_sidecar(bd: ScoreBreakdown, path) -> None:
    """Per-cell match records (audit trail for a rendered heatmap)."""
    with open(path, "w") as fh:
        fh.write("query_row\tquery_col\tmatched_scale\tmatched_row\t"
                 "matched_col\tfs\tsc\tcontribution\n")
        w = bd.query_width
        for i in range(len(bd)):
            r, c = divmod(i, w)
            fh.write(f"{r}\t{c}\t{int(bd.matched_scale[i])}\t"
                     f"{int(bd.matched_row[i])}\t{int(bd.matched_col[i])}\t"
                     f"{bd.fs[i]:.8g}\t{bd.sc[i]:.8g}\t{bd.contribution[i]:.8g}\n")
        fh.write(f"# total\t{bd.total:.10g}\tsigma_cells\t{bd.sigma_cells:g}\t"
                 f"orientation\t{bd.orientation_id}\n")


def save_curve_png(curve, path, k_marks=None, title="top-K accuracy") -> None:
    ks = np.arange(1, len(curve) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, curve, lw=1.5)
    if k_marks:
        marks = [k for k in k_marks if 1 <= k <= len(curve)]
        ax.plot(marks, [curve[k - 1] for k in marks], "o", ms=5)
    ax.set_xlabel("K")
    ax.set_ylabel("accuracy@K")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)


def write_eval_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write the evaluation outputs: tables, curve data, curve figure.

    Returns the paths that were written, keyed by artifact name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    acc_path = out_dir / "accuracy.tsv"
    with open(acc_path, "w") as fh:
        fh.write("k\taccuracy\n")
        for k in sorted(report.accuracy):
            fh.write(f"{k}\t{report.accuracy[k]:.6f}\n")
    paths["accuracy"] = acc_path

    curve_path = out_dir / "curve.tsv"
    with open(curve_path, "w") as fh:
        fh.write("k\taccuracy\n")
        for k, v in enumerate(report.curve, 1):
            fh.write(f"{k}\t{v:.6f}\n")
    paths["curve"] = curve_path

    per_query_path = out_dir / "per_query.tsv"
    with open(per_query_path, "w") as fh:
        fh.write("image\ttrue_class\trank\ttop1\tstage1_s\tstage2_s\n")
        for o in report.per_query:
            fh.write(f"{o.image_path}\t{o.true_class}\t"
                     f"{o.rank if o.rank is not None else ''}\t{o.top1}\t"
                     f"{o.stage1_seconds:.6f}\t{o.stage2_seconds:.6f}\n")
    paths["per_query"] = per_query_path

    summary_path = out_dir / "summary.txt"
    summary_path.write_text(format_eval_summary(report))
    paths["summary"] = summary_path

    png_path = out_dir / "curve.png"
    save_curve_png(report.curve, png_path, k_marks=sorted(report.accuracy))
    paths["curve_png"] = png_path
    return paths


def format_eval_summary(report: EvalReport) -> str:
    lines = [
        f"queries evaluated: {report.n_queries}",
        f"queries in error (class missing from index): {report.n_errors}",
        f"rerank N: {'all' if report.rerank_n is None else report.rerank_n}",
    ]
    for k in sorted(report.accuracy):
        lines.append(f"accuracy@{k}: {report.accuracy[k]:.4f}")
    lines.append(f"stage-1 latency: mean {report.stage1_mean * 1e3:.2f} ms, "
                 f"p95 {report.stage1_p95 * 1e3:.2f} ms")
    lines.append(f"stage-2 latency: mean {report.stage2_mean * 1e3:.2f} ms, "
                 f"p95 {report.stage2_p95 * 1e3:.2f} ms")
    if report.errors:
        lines.append("errors:")
        lines.extend(f"  {e}" for e in report.errors)
    return "\n".join(lines) + "\n"
