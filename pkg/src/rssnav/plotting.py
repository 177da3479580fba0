"""Matplotlib renderings of fields, visit heat maps, learning curves and paths.

Everything draws onto the non-interactive Agg canvas and writes straight to
a file; nothing is shown on screen.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    # keep output files byte-stable between runs
    "svg.hashsalt": "rssnav",
}

# png metadata without version strings or dates
_META = {"Software": None}


def _grid_figure(plan):
    aspect = plan.rows / max(plan.cols, 1)
    width = 7.0
    return plt.subplots(figsize=(width, max(2.0, width * aspect + 0.8)))


def _walls(ax, plan):
    walls = np.ma.masked_where(~plan.blocked, np.ones(plan.shape))
    ax.imshow(walls, cmap="Greys", vmin=0, vmax=1.2, interpolation="nearest")


def _markers(ax, plan):
    ax.plot(plan.start.col, plan.start.row, "o", color="tab:green", ms=7, label="start")
    ax.plot(plan.target.col, plan.target.row, "*", color="tab:red", ms=11, label="source")


def plot_field(plan, field, path, title="RSS (dBm)"):
    with plt.rc_context(STYLE):
        fig, ax = _grid_figure(plan)
        values = np.ma.masked_where(plan.blocked, field.values)
        im = ax.imshow(values, cmap="viridis", interpolation="nearest")
        _walls(ax, plan)
        _markers(ax, plan)
        fig.colorbar(im, ax=ax, label="dBm", shrink=0.8)
        ax.set_title(title)
        ax.set_xlabel("col")
        ax.set_ylabel("row")
        fig.savefig(path, metadata=_META)
        plt.close(fig)


def plot_visit_heatmap(plan, visits, path, title="Visits"):
    """Log-scaled count of agent visits per cell; brighter means more."""
    visits = np.asarray(visits)
    with plt.rc_context(STYLE):
        fig, ax = _grid_figure(plan)
        counts = np.ma.masked_where(plan.blocked | (visits <= 0), visits)
        if counts.count():
            im = ax.imshow(counts, cmap="inferno", norm=LogNorm(vmin=1, vmax=max(int(visits.max()), 2)),
                           interpolation="nearest")
            fig.colorbar(im, ax=ax, label="visits", shrink=0.8)
        ax.set_facecolor("black")
        _walls(ax, plan)
        _markers(ax, plan)
        ax.set_xlim(-0.5, plan.cols - 0.5)
        ax.set_ylim(plan.rows - 0.5, -0.5)
        ax.set_title(title)
        fig.savefig(path, metadata=_META)
        plt.close(fig)


def plot_learning_curve(mean_steps, std_steps, path, label=None):
    mean_steps = np.asarray(mean_steps, dtype=float)
    std_steps = np.asarray(std_steps, dtype=float)
    episodes = np.arange(1, len(mean_steps) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(episodes, mean_steps, lw=1.0, label=label)
        ax.fill_between(episodes, np.maximum(mean_steps - std_steps, 1), mean_steps + std_steps,
                        alpha=0.25, lw=0)
        if len(mean_steps) and mean_steps.min() > 0:
            ax.set_yscale("log")
        ax.set_xlabel("episode")
        ax.set_ylabel("steps per episode")
        if label:
            ax.legend()
        ax.grid(alpha=0.3)
        fig.savefig(path, metadata=_META)
        plt.close(fig)


def plot_trajectory(plan, trajectory, path, field=None, title="Final greedy trajectory"):
    with plt.rc_context(STYLE):
        fig, ax = _grid_figure(plan)
        if field is not None:
            ax.imshow(np.ma.masked_where(plan.blocked, field.values), cmap="viridis",
                      interpolation="nearest", alpha=0.6)
        else:
            ax.imshow(np.zeros(plan.shape), cmap="Greys", vmin=0, vmax=1)
        _walls(ax, plan)
        if trajectory:
            rows = [c[0] for c in trajectory]
            cols = [c[1] for c in trajectory]
            ax.plot(cols, rows, "-", color="tab:orange", lw=2)
        _markers(ax, plan)
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.savefig(path, metadata=_META)
        plt.close(fig)
