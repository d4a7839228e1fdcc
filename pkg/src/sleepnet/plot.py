"""Optional SVG rendering of evaluation results.

matplotlib is imported lazily and only when a plot is requested
(``pip install sleepnet[plot]``). CSV stays the source of truth; these
files are a convenience view of it.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from sleepnet_core.errors import SleepnetError


class PlotUnavailable(SleepnetError):
    """matplotlib is not installed."""


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise PlotUnavailable("plotting needs matplotlib: pip install 'sleepnet[plot]'") from None
    matplotlib.use("Agg")
    # deterministic SVG ids across reruns
    matplotlib.rcParams["svg.hashsalt"] = "sleepnet"
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_curves(curves: Sequence, path: Path | str, title: str = "") -> Path:
    """Mean quality per ignored-count bucket, one line per curve, SE error bars."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for curve in curves:
        buckets = curve.buckets
        xs = [b.ignored for b in buckets]
        ys = [b.mean for b in buckets]
        err = [0.0 if b.se is None else b.se for b in buckets]
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3, label=curve.recommender)
    ax.set_xlabel("recommendations ignored")
    ax.set_ylabel(f"mean quality ({curves[0].source})" if curves else "mean quality")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_calibration(report, path: Path | str) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], color="0.7", linestyle="--")
    ax.plot(report.nominal_p, report.coverage, marker="o")
    ax.set_xlabel("nominal probability")
    ax.set_ylabel("empirical coverage")
    r = "n/a" if report.r is None else f"{report.r:.3f}"
    ax.set_title(f"r = {r}")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_heatmap(matrix: np.ndarray, rows: Sequence[str], columns: Sequence[str],
                 path: Path | str, title: str = "", diverging: bool = True) -> Path:
    plt = _pyplot()
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(0.45 * len(columns) + 2.5, 0.35 * len(rows) + 1.5))
    if diverging:
        lim = float(np.max(np.abs(matrix))) or 1.0
        im = ax.imshow(matrix, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
    else:
        im = ax.imshow(matrix, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(columns)), labels=list(columns), rotation=60, ha="right")
    ax.set_yticks(range(len(rows)), labels=list(rows))
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_series(values: Sequence[float], path: Path | str, xlabel: str, ylabel: str,
                title: str = "") -> Path:
    """A single line: AIC per elimination step, loss per epoch."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(values)), list(values), marker=".")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out
