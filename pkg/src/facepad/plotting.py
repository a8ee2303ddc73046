"""Report figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(log, path):
    """Loss curves from a LossLog; the TPC term goes on a right-hand axis."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        step = log.column("step")
        for name in ("anti", "recg", "total"):
            ax.plot(step, log.column(name), lw=1, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        tpc = log.column("tpc")
        if np.any(tpc):
            ax2 = ax.twinx()
            ax2.plot(step, tpc, lw=1, color="0.5", ls="--", label="tpc")
            ax2.set_ylabel("tpc")
            ax2.grid(False)
        ax.legend(loc="upper right", frameon=False)
        return _save(fig, path)


def plot_roc(points, path, threshold=None):
    """FAR/FRR against threshold from ``roc_points`` output."""
    t, far, frr = (np.array(c) for c in zip(*points))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        # sentinel thresholds sit outside the score range; keep them off the axis
        inner = slice(1, -1) if len(t) > 2 else slice(None)
        ax.step(t[inner], far[inner], where="post", label="FAR (attacks accepted)")
        ax.step(t[inner], frr[inner], where="post", label="FRR (lives rejected)")
        if threshold is not None:
            ax.axvline(threshold, color="k", lw=0.8, ls=":")
        ax.set_xlabel("liveness threshold")
        ax.set_ylabel("rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_divergence(before, after, path, labels=("before", "after")):
    """Grouped bars of per-layer divergence, two dicts keyed by layer name."""
    layers = list(before)
    x = np.arange(len(layers))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - 0.2, [before[k] for k in layers], 0.4, label=labels[0])
        if after is not None:
            ax.bar(x + 0.2, [after[k] for k in layers], 0.4, label=labels[1])
        ax.set_xticks(x, layers)
        ax.set_yscale("log")
        ax.set_ylabel("mean symmetric KL")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(summary, path):
    """Intra/cross HTER per (TPC, FDA) cell from ``summarize_ablation``."""
    cells = list(summary)
    names = [f"TPC{'+' if t else '-'} FDA{'+' if f else '-'}" for t, f in cells]
    x = np.arange(len(cells))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - 0.2, [100 * summary[c]["intra_hter"] for c in cells], 0.4, label="intra")
        ax.bar(x + 0.2, [100 * summary[c]["cross_hter"] for c in cells], 0.4, label="cross")
        ax.set_xticks(x, names, rotation=15)
        ax.set_ylabel("HTER (%)")
        ax.legend(frameon=False)
        return _save(fig, path)
