"""Report figures rendered to files (non-interactive backend)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def read_metrics_log(path: str | Path) -> list[dict]:
    return [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]


def plot_training_curves(log_path: str | Path, out: str | Path) -> Path:
    """mDice and loss against step, train and val split."""
    rows = read_metrics_log(log_path)
    fig, (ax_d, ax_l) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split, style in (("train", "--"), ("val", "-")):
        pts = [r for r in rows if r["split"] == split]
        if not pts:
            continue
        steps = [r["step"] for r in pts]
        ax_d.plot(steps, [r["mDice"] for r in pts], style, marker="o", ms=3, label=split)
        ax_l.plot(steps, [r["loss"] for r in pts], style, marker="o", ms=3, label=split)
    ax_d.set_xlabel("step")
    ax_d.set_ylabel("mDice")
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    for ax in (ax_d, ax_l):
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
    return _save(fig, out)


def plot_ablation(rows: Sequence[dict], out: str | Path, title: str = "") -> Path:
    """Bar chart of mean test mDice with one-sd error bars, one bar per row."""
    labels = [f"({r['row']}) {r['label']}" if len(r["row"]) == 1 else r["label"] for r in rows]
    means = np.array([r["mDice_mean"] for r in rows]) * 100
    sds = np.array([r["mDice_sd"] for r in rows]) * 100
    fig, ax = plt.subplots(figsize=(1.4 * len(rows) + 2, 3.6))
    x = np.arange(len(rows))
    ax.bar(x, means, yerr=sds, capsize=4, color="0.6", edgecolor="0.2")
    for xi, r in zip(x, rows):
        ax.scatter(np.full(len(r["mDice"]), xi), np.asarray(r["mDice"]) * 100, s=10, color="k", zorder=3)
    lo = float(min(np.min(np.asarray(r["mDice"])) for r in rows)) * 100
    ax.set_ylim(max(0.0, lo - 5), 100)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=25, ha="right")
    ax.set_ylabel("test mDice (%)")
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out)


def plot_similarity_panel(image: np.ndarray, mask: np.ndarray, maps: dict[str, np.ndarray], prompt: str,
                          out: str | Path) -> Path:
    """Image, ground truth and one heatmap per variant side by side."""
    fig, axes = plt.subplots(1, 2 + len(maps), figsize=(2.6 * (2 + len(maps)), 2.9))
    axes[0].imshow(np.squeeze(image), cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("image")
    axes[1].imshow(mask, cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("mask")
    for ax, (name, m) in zip(axes[2:], maps.items()):
        ax.imshow(m, cmap="inferno", vmin=0, vmax=255)
        ax.contour(mask, levels=[0.5], colors="c", linewidths=0.6)
        ax.set_title(name)
    for ax in axes:
        ax.set_axis_off()
    fig.suptitle(prompt, fontsize=8)
    return _save(fig, out)


def plot_param_breakdown(counts: dict, out: str | Path) -> Path:
    """Horizontal bars of parameters per module, trainable and frozen shaded apart."""
    items = sorted(counts["modules"].items(), key=lambda kv: kv[1])
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(items) + 1.2))
    colors = ["0.75" if k.startswith("frozen.") else "tab:blue" for k, _ in items]
    ax.barh([k for k, _ in items], [v for _, v in items], color=colors)
    ax.set_xlabel("parameters")
    ax.set_title(f"trainable {counts['trainable']:,}  frozen {counts['frozen']:,}", fontsize=9)
    ax.grid(axis="x", alpha=0.3)
    return _save(fig, out)
