"""F1 at score thresholds, per-label-group statistics and KDE curves of min_dists."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import LABEL_CODES
from .errors import DegenerateInputError, ParameterError
from .patchcore import AnomalyResult, classify

DEFAULT_THRESHOLDS = (0.3, 0.5)
DEFAULT_KDE_GRID = 512
MAX_KDE_GRID = 4096
KDE_CUT = 3.0

# the intrados group also takes the points on the opened groove walls
LABEL_GROUPS = {
    "non_crack": (LABEL_CODES["none"],),
    "intrados": (LABEL_CODES["intrados_crack"], LABEL_CODES["inner_crack"]),
    "extrados": (LABEL_CODES["extrados_crack"],),
    "water": (LABEL_CODES["water_patch"],),
}


@dataclass(frozen=True)
class ThresholdMetrics:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return 2.0 * self.tp / (2 * self.tp + self.fp + self.fn) if self.tp else 0.0


@dataclass(frozen=True)
class GroupStats:
    n: int
    mean: float
    std: float


@dataclass(frozen=True)
class KDECurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass
class EvalReport:
    metrics: Tuple[ThresholdMetrics, ...]
    groups: Dict[str, GroupStats]
    kde: Dict[str, KDECurve] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def f1(self, threshold: float) -> float:
        for m in self.metrics:
            if m.threshold == threshold:
                return m.f1
        raise KeyError(threshold)

    def to_text(self) -> str:
        lines = ["# anomaly evaluation report"]
        for key in sorted(self.config):
            lines.append(f"config.{key} = {self.config[key]}")
        for m in self.metrics:
            lines.append(f"threshold {m.threshold:g}: tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn} "
                         f"precision={m.precision:.6f} recall={m.recall:.6f} f1={m.f1:.6f}")
        for name in LABEL_GROUPS:
            g = self.groups.get(name)
            if g is None:
                lines.append(f"group {name}: absent")
            else:
                lines.append(f"group {name}: n={g.n} mean={g.mean:.6f} std={g.std:.6f}")
        for name, curve in self.kde.items():
            lines.append(f"kde {name}: bandwidth={curve.bandwidth:.6g} points={curve.grid.size}")
        return "\n".join(lines) + "\n"


def _check_aligned(result: AnomalyResult, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (len(result),):
        raise ParameterError(f"labels have shape {labels.shape}, result has {len(result)} rows")
    return labels


def f1_at(result: AnomalyResult, labels, thresholds: Sequence[float] = DEFAULT_THRESHOLDS):
    """Confusion counts and F1 for ``score > t`` at each threshold.

    Scores are already max-normalized, so a threshold given as a fraction of
    the maximum score is used as is.
    """
    labels = _check_aligned(result, labels)
    positive = labels != LABEL_CODES["none"]
    out = []
    for t in thresholds:
        pred = classify(result, float(t))
        tp = int(np.count_nonzero(pred & positive))
        fp = int(np.count_nonzero(pred & ~positive))
        fn = int(np.count_nonzero(~pred & positive))
        out.append(ThresholdMetrics(float(t), tp, fp, fn, int(positive.size - tp - fp - fn)))
    return tuple(out)


def group_masks(labels) -> Dict[str, np.ndarray]:
    labels = np.asarray(labels)
    return {name: np.isin(labels, codes) for name, codes in LABEL_GROUPS.items()}


def label_stats(result: AnomalyResult, labels, ddof: int = 0) -> Dict[str, GroupStats]:
    """Mean and standard deviation of min_dists per label group; empty groups are omitted.

    ``ddof=0`` gives the population deviation, ``ddof=1`` the sample one.
    """
    labels = _check_aligned(result, labels)
    stats = {}
    for name, mask in group_masks(labels).items():
        values = result.min_dists[mask]
        if values.size == 0:
            continue
        if values.max() == values.min():   # exact, free of summation residue
            stats[name] = GroupStats(int(values.size), float(values[0]), 0.0)
            continue
        std = float(np.std(values, ddof=ddof)) if values.size > ddof else 0.0
        stats[name] = GroupStats(int(values.size), float(np.mean(values)), std)
    return stats


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 min(sd, IQR/1.34) n^(-1/5); the IQR term is dropped when it is zero."""
    n = values.size
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def kde(values, grid_size: int = DEFAULT_KDE_GRID, bandwidth: Optional[float] = None) -> KDECurve:
    """Gaussian KDE on a uniform grid over [min - 3h, max + 3h].

    The grid is refined (up to MAX_KDE_GRID points) so that its step does not
    exceed h/2, and the curve is rescaled to unit trapezoid mass, which puts
    the tail mass beyond the 3h cut back into the curve.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateInputError(f"KDE needs at least 2 values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("KDE input contains non-finite values")
    if x.max() == x.min():
        raise DegenerateInputError("KDE input has zero spread")
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(x)
    if not h > 0:
        raise DegenerateInputError("KDE bandwidth is zero")
    lo, hi = x.min() - KDE_CUT * h, x.max() + KDE_CUT * h
    needed = int(np.ceil((hi - lo) / (0.5 * h))) + 1
    size = int(min(max(grid_size, needed), MAX_KDE_GRID))
    grid = np.linspace(lo, hi, size)
    density = np.zeros(size)
    xs = np.sort(x)
    step = max(1, 2_000_000 // size)
    for start in range(0, xs.size, step):
        z = (grid[:, None] - xs[None, start:start + step]) / h
        density += np.exp(-0.5 * z * z).sum(axis=1)
    density /= xs.size * h * np.sqrt(2.0 * np.pi)
    density /= np.trapezoid(density, grid)
    return KDECurve(grid, density, h)


def evaluate(result: AnomalyResult, labels, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             kde_grid: int = DEFAULT_KDE_GRID, ddof: int = 0) -> EvalReport:
    """Full report: threshold metrics, group statistics and a KDE per group where defined."""
    labels = _check_aligned(result, labels)
    metrics = f1_at(result, labels, thresholds)
    groups = label_stats(result, labels, ddof)
    curves = {}
    for name, mask in group_masks(labels).items():
        try:
            curves[name] = kde(result.min_dists[mask], kde_grid)
        except DegenerateInputError:
            continue
    config = {"thresholds": ",".join(f"{t:g}" for t in thresholds), "bandwidth": "silverman",
              "std": "population" if ddof == 0 else "sample", "kde_cut": f"{KDE_CUT:g}h",
              "degenerate_norm": bool(result.degenerate_norm)}
    return EvalReport(metrics, groups, curves, config)
