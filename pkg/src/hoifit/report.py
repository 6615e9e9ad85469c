"""Figure rendering for completed runs.

Loss-curve and metric figures are written next to the delimited outputs so
a run directory is self-describing without any interactive tooling.  The
PNG writer is kept deterministic (fixed dpi, no Software metadata) so
figures participate in byte-identical reruns.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _read_history(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    iters = [int(r["iteration"]) for r in rows]
    series = {}
    for key in rows[0]:
        if not key.startswith("weighted_") and key != "total":
            continue
        vals = [float(r[key]) if r[key] != "" else float("nan") for r in rows]
        series[key.removeprefix("weighted_")] = vals
    return iters, series


def plot_history(csv_path, png_path, title: str):
    iters, series = _read_history(Path(csv_path))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(series):
        vals = series[name]
        if all(v != v for v in vals):  # all-NaN column
            continue
        lw = 2.0 if name == "total" else 1.0
        ax.plot(iters, vals, label=name, linewidth=lw)
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted term value")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2, loc="upper right")
    fig.tight_layout()
    fig.savefig(png_path, **_SAVE_KW)
    plt.close(fig)


def plot_metrics(metrics_json, input_json, png_path):
    rep = json.loads(Path(metrics_json).read_text())
    base = json.loads(Path(input_json).read_text()) if input_json else None
    names = ["miou", "pen_ratio", "ho_dist", "acc_h", "acc_o"]
    labels = ["mIoU (%)", "Pen. Ratio (%)", "H-O Dist. (cm)",
              "Acc_h (cm/fr$^2$)", "Acc_o (cm/fr$^2$)"]
    fig, axes = plt.subplots(1, len(names), figsize=(11, 3))
    for ax, name, label in zip(axes, names, labels):
        vals, ticks = [rep[name]], ["fit"]
        if base is not None:
            vals.append(base[name])
            ticks.append("input")
        vals = [0.0 if v is None else v for v in vals]
        ax.bar(range(len(vals)), vals, color=["#3465a4", "#babdb6"][:len(vals)])
        ax.set_xticks(range(len(ticks)))
        ax.set_xticklabels(ticks, fontsize=8)
        ax.set_title(label, fontsize=9)
    fig.tight_layout()
    fig.savefig(png_path, **_SAVE_KW)
    plt.close(fig)


def write_report_figures(run_dir) -> list:
    """Render every available figure for a run; returns the paths written."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stage, title in (("stage1", "isolated fitting"),
                         ("stage3", "joint contact-aware optimization")):
        hist = run_dir / stage / "history.csv"
        if hist.exists():
            png = out / f"{stage}_loss.png"
            plot_history(hist, png, title)
            written.append(png)
    mj = run_dir / "metrics" / "metrics.json"
    if mj.exists():
        ij = run_dir / "metrics" / "input_metrics.json"
        png = out / "metrics.png"
        plot_metrics(mj, ij if ij.exists() else None, png)
        written.append(png)
    return written
