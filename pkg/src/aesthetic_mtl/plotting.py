"""Report figures for training runs and evaluations.

Figures are built on ``matplotlib.figure.Figure`` directly (no pyplot state)
and written as PNG next to the delimited outputs.
"""
from __future__ import annotations

import functools
from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

from .metrics import DIMENSION_TITLES

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "lines.linewidth": 1.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
TASK_COLORS = {"fineness": "#1f77b4", "colorfulness": "#ff7f0e", "harmony": "#2ca02c", "overall": "#d62728"}
DPI = 120


def _styled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with mpl.rc_context(STYLE):
            return fn(*args, **kwargs)
    return wrapper


def _figure(nrows=1, ncols=1, size=(6.4, 4.0)):
    fig = Figure(figsize=size, layout="constrained")
    return fig, fig.subplots(nrows, ncols, squeeze=False)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    return path


def _title(t):
    return DIMENSION_TITLES.get(t, t)


@_styled
def plot_training_curves(log, path) -> Path:
    """Per-task train (dashed) and validation (solid) EMD against epoch."""
    fig, ax = _figure()
    ax = ax[0, 0]
    ep = [r["epoch"] for r in log.epochs]
    for t in log.tasks:
        c = TASK_COLORS.get(t)
        ax.plot(ep, [r[f"train_{t}"] for r in log.epochs], "--", color=c, alpha=0.7)
        val = [r[f"val_{t}"] for r in log.epochs]
        if not np.all(np.isnan(val)):
            ax.plot(ep, val, "-", color=c, label=_title(t))
    if log.best_epoch:
        ax.axvline(log.best_epoch, color="0.5", lw=0.8, ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("EMD")
    ax.set_yscale("log")
    ax.set_title(f"{log.mode}: train (dashed) / validation (solid)")
    ax.legend(frameon=False)
    return _save(fig, path)


@_styled
def plot_task_weights(log, path) -> Path | None:
    """Stacked per-step task weights; nothing is written when the log has none."""
    if not log.deltas:
        return None
    fig, ax = _figure(size=(6.4, 3.2))
    ax = ax[0, 0]
    x = np.arange(len(log.deltas))
    ys = [[r[f"delta_{t}"] for r in log.deltas] for t in log.tasks]
    ax.stackplot(x, ys, labels=[_title(t) for t in log.tasks], colors=[TASK_COLORS.get(t) for t in log.tasks],
                 alpha=0.85)
    ax.set_xlim(0, max(len(x) - 1, 1))
    ax.set_ylim(0, 1)
    ax.set_xlabel("step")
    ax.set_ylabel("task weight")
    ax.legend(frameon=False, loc="upper right", ncol=len(log.tasks))
    return _save(fig, path)


@_styled
def plot_lr_schedule(log, path) -> Path:
    fig, ax = _figure(size=(6.4, 2.6))
    ax = ax[0, 0]
    ax.step([r["epoch"] for r in log.epochs], log.lr_trace, where="post")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_yscale("log")
    return _save(fig, path)


@_styled
def plot_eval_scatter(truth: dict, pred: dict, report, path) -> Path:
    """Predicted against true mean score, one panel per dimension, measures in the titles."""
    dims = [d for d in truth if d in report.values]
    fig, axes = _figure(1, len(dims), size=(3.0 * len(dims), 3.2))
    for ax, d in zip(axes[0], dims):
        ax.scatter(truth[d], pred[d], s=8, alpha=0.6, color=TASK_COLORS.get(d))
        ax.plot([1, 5], [1, 5], color="0.6", lw=0.8)
        ax.set_xlim(1, 5)
        ax.set_ylim(1, 5)
        ax.set_aspect("equal")
        m = report.values[d]
        ax.set_title(f"{_title(d)}\nPCC {m['pcc']:.3f}  SCC {m['scc']:.3f}  RMSE {m['rmse']:.3f}", fontsize=9)
        ax.set_xlabel("true score")
    axes[0, 0].set_ylabel("predicted score")
    return _save(fig, path)
