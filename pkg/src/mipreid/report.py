"""Figures for the ablation table."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_ablation(rows, path: str | Path, metric: str = "rank1") -> Path:
    """Bar of the per-config mean with one dot per seed, in table order."""
    order: list[str] = []
    values: dict[str, list[float]] = {}
    for r in rows:
        if r.config not in values:
            order.append(r.config)
            values[r.config] = []
        if r.status == "ok":
            values[r.config].append(getattr(r, metric))
    means = [np.mean(values[c]) if values[c] else np.nan for c in order]
    x = np.arange(len(order))

    fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(order), 3.2))
    ax.bar(x, means, color="0.75", edgecolor="0.3", width=0.6)
    for xi, c in zip(x, order):
        pts = values[c]
        ax.plot(np.full(len(pts), xi), pts, "o", color="C0", ms=3.5)
    ax.set_xticks(x)
    ax.set_xticklabels(order, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
