"""Static figures for loss logs and result tables (PNG plus a copy of the CSV)."""

from __future__ import annotations

import csv
import shutil
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty table")
    return rows[0], rows[1:]


def loss_curves(path, out_dir) -> list[Path]:
    """One panel per stage; rounds are concatenated along the x axis."""
    header, rows = _read(path)
    if header[:5] != ["round", "stage", "epoch", "loss", "gate"]:
        raise ValueError(f"{path}: not a loss log")
    series = defaultdict(list)
    for r, stage, _, loss, g in rows:
        series[int(stage)].append((int(r), float(loss), float(g)))
    stages = sorted(series)
    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 3.5), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        pts = series[stage]
        ax.plot(range(1, len(pts) + 1), [p[1] for p in pts], marker=".")
        for i in range(1, len(pts)):
            if pts[i][0] != pts[i - 1][0]:
                ax.axvline(i + 0.5, color="grey", lw=0.6, ls="--")
        ax.set_title("denoiser (gated ELBO)" if stage == 1 else "recommender")
        ax.set_xlabel("epoch (all rounds)")
        ax.set_ylabel("loss")
    fig.tight_layout()
    out = Path(out_dir) / (Path(path).stem + ".png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return [out]


def metric_table(path, out_dir) -> list[Path]:
    """Grouped bars for an ablation table, lines for a sweep table."""
    header, rows = _read(path)
    metrics = [h for h in header if "@" in h]
    n_labels = len(header) - len(metrics)
    labels = [" ".join(r[:n_labels]) for r in rows]
    values = [[float(v) for v in r[n_labels:]] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    if header[0] == "param":
        x = [float(r[1]) for r in rows]
        for j, m in enumerate(metrics):
            ax.plot(x, [v[j] for v in values], marker="o", label=m)
        ax.set_xlabel(rows[0][0] if rows else "value")
    else:
        width = 0.8 / max(len(metrics), 1)
        for j, m in enumerate(metrics):
            ax.bar([i + j * width for i in range(len(rows))], [v[j] for v in values], width, label=m)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))], labels)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    stem = Path(out_dir) / Path(path).stem
    png = stem.with_suffix(".png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    copy = stem.with_suffix(".csv")
    if Path(path).resolve() != copy.resolve():
        shutil.copyfile(path, copy)
    return [png, copy]
