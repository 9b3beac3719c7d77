"""Figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in (rows[0].keys() if rows else [])}


def plot_metrics(csv_path, png_path):
    m = _read(csv_path)
    if not m:
        return None
    steps = m["steps"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(steps, m["mean_return"])
    axes[0].set_ylabel("mean return")
    axes[1].plot(steps, m["success_rate"], label="success")
    axes[1].plot(steps, m["collision_rate"], label="collision")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].legend(loc="best", fontsize=8)
    axes[2].plot(steps, m["level"], drawstyle="steps-post")
    axes[2].set_ylabel("curriculum level")
    for ax in axes:
        ax.set_xlabel("env steps")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


def plot_bench(reports, png_path):
    """``reports``: {label: bench report}. Bars of mean collisions and success per class."""
    labels = list(reports)
    classes = list(next(iter(reports.values()))["classes"]) if reports else []
    if not classes:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.4))
    width = 0.8 / max(len(labels), 1)
    for j, lab in enumerate(labels):
        cls = reports[lab]["classes"]
        xs = [i + j * width for i in range(len(classes))]
        axes[0].bar(xs, [cls[c]["mean_collisions"] for c in classes], width, label=lab)
        axes[1].bar(xs, [cls[c]["success_rate"] for c in classes], width, label=lab)
    for ax, name in zip(axes, ("collisions per run", "success rate")):
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(classes))])
        ax.set_xticklabels(classes)
        ax.set_ylabel(name)
        ax.legend(fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


def plot_parallelism(results, png_path):
    """``results``: {B: [mean return per seed]}."""
    bs = sorted(results)
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for k in range(max(len(v) for v in results.values())):
        ys = [results[b][k] if k < len(results[b]) else math.nan for b in bs]
        ax.plot(bs, ys, marker="o", label=f"seed {k}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("parallel robots B")
    ax.set_ylabel("mean return at budget")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path
