"""Coreset memory bank and nearest-neighbour anomaly scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import FeatureMatrix, check_layout
from .errors import ParameterError

DEFAULT_BANK_SIZE = 4000
NORM_EPS = 1e-12


@dataclass(eq=False)
class MemoryBank:
    features: np.ndarray
    layout: tuple
    seed: int
    source_id: str = ""
    selected: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.features.shape[0]


@dataclass(eq=False)
class AnomalyResult:
    min_dists: np.ndarray
    scores: np.ndarray
    nearest_bank_id: np.ndarray
    degenerate_norm: bool

    def __len__(self) -> int:
        return self.min_dists.shape[0]


def exact_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance; the reference arithmetic for all feature distances."""
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def greedy_coreset(x: np.ndarray, m: int, first: int, projection: Optional[np.ndarray] = None) -> np.ndarray:
    """Greedy k-center selection starting from row ``first``.

    Each step adds the row farthest from its nearest selected row, ties going
    to the lowest row index. Distances use the expanded form
    |x|^2 + |c|^2 - 2 x.c, which reduces each step to one matrix-vector product.
    """
    n = x.shape[0]
    m = min(m, n)
    z = x if projection is None else x @ projection
    sq = np.einsum("ij,ij->i", z, z)
    selected = np.empty(m, dtype=np.int64)
    min_d2 = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    current = first
    for step in range(m):
        selected[step] = current
        taken[current] = True
        c = z[current]
        d2 = np.maximum(sq + sq[current] - 2.0 * (z @ c), 0.0)
        np.minimum(min_d2, d2, out=min_d2)
        if step == m - 1:
            break
        min_d2[taken] = -1.0
        current = int(np.argmax(min_d2))
    return selected


def build_memory(features_ref: FeatureMatrix, m: int = DEFAULT_BANK_SIZE, seed: int = 0,
                 start: str = "random", projection_dim: Optional[int] = None,
                 source_id: str = "") -> MemoryBank:
    """Compress reference descriptors into a coreset of at most ``m`` rows.

    ``start="random"`` draws the first row from ``seed``; ``start="max_norm"``
    takes the row of largest norm. ``projection_dim`` enables a seeded
    Gaussian random projection for the selection distances only.
    """
    x = features_ref.rows
    if x.shape[0] == 0:
        raise ParameterError("cannot build a memory bank from an empty feature matrix")
    if m < 1:
        raise ParameterError(f"bank size must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    if start == "random":
        first = int(rng.integers(x.shape[0]))
    elif start == "max_norm":
        first = int(np.argmax(np.einsum("ij,ij->i", x, x)))
    else:
        raise ParameterError(f"unknown coreset start {start!r}")
    projection = None
    if projection_dim:
        projection = rng.standard_normal((x.shape[1], projection_dim)) / np.sqrt(projection_dim)
    selected = greedy_coreset(x, m, first, projection)
    params = {"start": start, "projection_dim": projection_dim or 0, "m_requested": int(m)}
    return MemoryBank(x[selected].copy(), features_ref.layout, int(seed), source_id, selected, params)


def nearest_rows(x: np.ndarray, bank: np.ndarray, chunk: int = 2048):
    """Exact nearest bank row for every row of ``x`` (ties to the lowest bank index).

    A GEMM pass screens candidates with a rounding-error margin; survivors are
    re-measured with :func:`exact_distances`, so the returned distances are
    bitwise those of an exhaustive search.
    """
    n = x.shape[0]
    min_d = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    b_sq = np.einsum("ij,ij->i", bank, bank)
    b_max = b_sq.max() if b_sq.size else 0.0
    width = x.shape[1]
    for start in range(0, n, chunk):
        xs = x[start:start + chunk]
        x_sq = np.einsum("ij,ij->i", xs, xs)
        approx = x_sq[:, None] + b_sq[None, :] - 2.0 * (xs @ bank.T)
        # bound on |expanded - exact| squared distance, with a wide safety factor
        tol = 8.0 * (width + 4) * np.finfo(float).eps * (x_sq + b_max) + 1e-300
        best = approx.min(axis=1)
        rows, cols = np.nonzero(approx <= (best + 2.0 * tol)[:, None])
        d = exact_distances(xs[rows], bank[cols])
        order = np.lexsort((cols, d, rows))
        rows, cols, d = rows[order], cols[order], d[order]
        first = np.r_[True, rows[1:] != rows[:-1]]
        min_d[start + rows[first]] = d[first]
        arg[start + rows[first]] = cols[first]
    return min_d, arg


def normalize_scores(min_dists: np.ndarray):
    top = float(min_dists.max()) if min_dists.size else 0.0
    if top < NORM_EPS:
        return np.zeros_like(min_dists), True
    return min_dists / top, False


def score(features_test: FeatureMatrix, bank: MemoryBank, chunk: int = 2048) -> AnomalyResult:
    """Min distance of each test row to the bank, max-normalized into [0, 1]."""
    check_layout(bank.layout, features_test.layout)
    if bank.m == 0:
        raise ParameterError("memory bank is empty")
    min_d, arg = nearest_rows(features_test.rows, bank.features, chunk)
    scores, degenerate = normalize_scores(min_d)
    return AnomalyResult(min_d, scores, arg, degenerate)


def classify(result: AnomalyResult, threshold: float) -> np.ndarray:
    """Strict ``score > threshold`` mask."""
    return result.scores > threshold


def propagate_to_points(result: AnomalyResult, point_ids: np.ndarray, positions: np.ndarray) -> AnomalyResult:
    """Expand a per-row result onto every point of the cloud.

    Points without a feature row take the values of the nearest point that
    has one.
    """
    from scipy.spatial import cKDTree

    n = positions.shape[0]
    point_ids = np.asarray(point_ids, dtype=np.int64)
    src = np.full(n, -1, dtype=np.int64)
    src[point_ids] = np.arange(point_ids.size)
    missing = np.flatnonzero(src < 0)
    if missing.size:
        _, nearest = cKDTree(positions[point_ids]).query(positions[missing], k=1)
        src[missing] = np.asarray(nearest, dtype=np.int64)
    return AnomalyResult(result.min_dists[src], result.scores[src],
                         result.nearest_bank_id[src], result.degenerate_norm)
