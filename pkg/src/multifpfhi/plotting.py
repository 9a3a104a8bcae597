"""PNG figures for reports: KDE curves per label group and a heatmap plan view.

Figures are drawn on the Agg canvas directly, so importing this module never
touches the global pyplot backend.
"""

from __future__ import annotations

import os

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import FileAccessError
from .io import heatmap_colors

_GROUP_COLORS = {"non_crack": "tab:blue", "intrados": "tab:red",
                 "extrados": "tab:orange", "water": "tab:cyan"}
_PNG_META = {"Software": None}


def _save(fig: Figure, path: str) -> None:
    FigureCanvasAgg(fig)
    try:
        fig.savefig(path, dpi=120, metadata=_PNG_META)
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None


def plot_kde(report, path: str, title: str = "") -> None:
    """All group KDE curves on one axis, with group means in the legend."""
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot()
    for name, curve in report.kde.items():
        g = report.groups.get(name)
        label = name if g is None else f"{name} (mean {g.mean:.3g}, sd {g.std:.3g})"
        ax.plot(curve.grid, curve.density, color=_GROUP_COLORS.get(name), label=label)
        ax.fill_between(curve.grid, curve.density, color=_GROUP_COLORS.get(name), alpha=0.15)
    ax.set_xlabel("min distance to memory bank")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    if report.kde:
        ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def plot_heatmap(positions: np.ndarray, scores: np.ndarray, path: str, title: str = "") -> None:
    """Plan view (x, y) of the cloud coloured by the heatmap ramp, highest scores on top."""
    order = np.argsort(scores, kind="stable")
    colors = heatmap_colors(scores[order]) / 255.0
    fig = Figure(figsize=(6.4, 4.8))
    ax = fig.add_subplot()
    ax.scatter(positions[order, 0], positions[order, 1], c=colors, s=1.0, linewidths=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def write_figures(report, positions: np.ndarray, scores: np.ndarray, outdir: str) -> dict:
    paths = {"kde_png": os.path.join(outdir, "kde.png"),
             "heatmap_png": os.path.join(outdir, "heatmap.png")}
    plot_kde(report, paths["kde_png"], "min-distance densities by label group")
    plot_heatmap(positions, scores, paths["heatmap_png"], "anomaly score")
    return paths
