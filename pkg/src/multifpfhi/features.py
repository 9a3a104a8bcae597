"""FPFH, the 3D intensity histogram, and their concatenation (3DMulti-FPFHI)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .core import (NeighborGraph, NormalField, PointCloud, SpatialIndex, build_index,
                   radius_graph)
from .errors import LayoutMismatchError, ParameterError

DEFAULT_BINS = 30
ANGLE_BLOCKS = ("alpha", "phi", "theta")
# |t x u| below this means the connecting line is parallel to the source normal
DEGENERATE_FRAME_EPS = 1e-8
ROLE_TIE_EPS = 1e-12
ZERO_SNAP = 1e-12  # angles this close to 0 are binned as exactly 0
FEATURE_MODES = ("fpfh", "intensity", "multi")


@dataclass(frozen=True)
class Block:
    name: str
    bins: int
    weight: float = 1.0


@dataclass(eq=False)
class FeatureMatrix:
    """Per-point descriptor rows laid out as consecutive histogram blocks.

    ``point_ids`` maps each row back to the cloud it was computed on and
    ``empty[i, b]`` flags a block left all-zero because the neighbourhood
    contributed nothing.
    """

    rows: np.ndarray
    layout: tuple
    point_ids: np.ndarray
    empty: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        self.layout = tuple(self.layout)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        self.empty = np.asarray(self.empty, dtype=bool)
        n = self.rows.shape[0]
        if self.rows.ndim != 2 or self.rows.shape[1] != self.width:
            raise ParameterError(f"row width {self.rows.shape} does not match layout width {self.width}")
        if self.point_ids.shape != (n,) or self.empty.shape != (n, len(self.layout)):
            raise ParameterError("point_ids / empty flags do not match the row count")

    @property
    def width(self) -> int:
        return sum(b.bins for b in self.layout)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def block_slice(self, name: str) -> slice:
        start = 0
        for b in self.layout:
            if b.name == name:
                return slice(start, start + b.bins)
            start += b.bins
        raise KeyError(name)

    @property
    def block_names(self) -> tuple:
        return tuple(b.name for b in self.layout)


def check_layout(a: Sequence[Block], b: Sequence[Block]) -> None:
    if tuple(a) != tuple(b):
        raise LayoutMismatchError(
            f"feature layouts differ: {_describe(a)} vs {_describe(b)}")


def _describe(layout) -> str:
    return "[" + ", ".join(f"{b.name}:{b.bins}x{b.weight:g}" for b in layout) + "]"


class PairAngles(NamedTuple):
    alpha: float
    phi: float
    theta: float
    d: float
    degenerate: bool = False


def _pair_angles(p1, n1, p2, n2, i1, i2):
    """Vectorised Darboux-frame angles for pairs (p1[k], p2[k]).

    Returns alpha, phi, theta, d and a degenerate mask. The source of each
    pair is the point whose normal makes the smaller angle with the
    connecting line; equal angles go to the lower index.
    """
    # component-wise on 1-D arrays: far cheaper than reductions over a length-3 axis
    p1x, p1y, p1z = p1.T
    p2x, p2y, p2z = p2.T
    n1x, n1y, n1z = n1.T
    n2x, n2y, n2z = n2.T
    dx, dy, dz = p2x - p1x, p2y - p1y, p2z - p1z
    d = np.sqrt(dx * dx + dy * dy + dz * dz)
    with np.errstate(invalid="ignore", divide="ignore"):
        tx, ty, tz = dx / d, dy / d, dz / d
    a1 = np.abs(n1x * tx + n1y * ty + n1z * tz)
    a2 = np.abs(n2x * tx + n2y * ty + n2z * tz)
    swap = (a2 > a1 + ROLE_TIE_EPS) | ((np.abs(a2 - a1) <= ROLE_TIE_EPS) & (i2 < i1))
    ux, uy, uz = np.where(swap, n2x, n1x), np.where(swap, n2y, n1y), np.where(swap, n2z, n1z)
    mx, my, mz = np.where(swap, n1x, n2x), np.where(swap, n1y, n2y), np.where(swap, n1z, n2z)
    sign = np.where(swap, -1.0, 1.0)
    tx, ty, tz = tx * sign, ty * sign, tz * sign
    # v = t x u
    vx, vy, vz = ty * uz - tz * uy, tz * ux - tx * uz, tx * uy - ty * ux
    v_norm = np.sqrt(vx * vx + vy * vy + vz * vz)
    degenerate = ~(v_norm >= DEGENERATE_FRAME_EPS) | ~(d > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        vx, vy, vz = vx / v_norm, vy / v_norm, vz / v_norm
    # w = u x v
    wx, wy, wz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
    alpha = vx * mx + vy * my + vz * mz
    phi = ux * tx + uy * ty + uz * tz
    theta = np.arctan2(wx * mx + wy * my + wz * mz, ux * mx + uy * my + uz * mz)
    return alpha, phi, theta, d, degenerate


def darboux_angles(p_s, n_s, p_t, n_t, i_s: int = 0, i_t: int = 1) -> PairAngles:
    """Pair angles of two oriented points (roles are reassigned as needed)."""
    p_s, n_s, p_t, n_t = (np.asarray(x, dtype=np.float64).reshape(1, 3) for x in (p_s, n_s, p_t, n_t))
    if np.array_equal(p_s, p_t):
        raise ParameterError("darboux_angles needs two distinct points")
    alpha, phi, theta, d, deg = _pair_angles(p_s, n_s, p_t, n_t, np.array([i_s]), np.array([i_t]))
    if deg[0]:
        return PairAngles(math.nan, math.nan, math.nan, float(d[0]), True)
    return PairAngles(float(alpha[0]), float(phi[0]), float(theta[0]), float(d[0]), False)


def bin_index(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Uniform half-open bins over [lo, hi]; ``hi`` itself lands in the last bin."""
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _normalize_blocks(hist: np.ndarray, n_blocks: int):
    """Scale each block to unit mass; returns (hist, empty flags)."""
    n, width = hist.shape
    blocks = hist.reshape(n, n_blocks, width // n_blocks)
    mass = blocks.sum(axis=2)
    empty = mass <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        blocks = np.where(empty[:, :, None], 0.0, blocks / mass[:, :, None])
    return blocks.reshape(n, width), empty


def _row_chunks(graph: NeighborGraph, target_pairs: int = 1 << 20):
    """Split rows into contiguous ranges holding about ``target_pairs`` pairs each."""
    n = len(graph.indptr) - 1
    bounds = [0]
    ptr = graph.indptr
    while bounds[-1] < n:
        start = bounds[-1]
        stop = int(np.searchsorted(ptr, ptr[start] + target_pairs, side="right")) - 1
        bounds.append(min(n, max(stop, start + 1)))
    return list(zip(bounds[:-1], bounds[1:]))


def _map_chunks(fn, chunks, workers: int):
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


@numba.njit(cache=True, nogil=True)
def _spfh_kernel(indptr, indices, pos, nrm, start, stop, bins):
    """Angle histograms for rows [start, stop); same arithmetic as ``_pair_angles``."""
    out = np.zeros((stop - start, 3 * bins))
    two_pi = 2.0 * math.pi
    for i in range(start, stop):
        r = i - start
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if not d > 0:
                continue
            tx, ty, tz = dx / d, dy / d, dz / d
            a1 = abs(nrm[i, 0] * tx + nrm[i, 1] * ty + nrm[i, 2] * tz)
            a2 = abs(nrm[j, 0] * tx + nrm[j, 1] * ty + nrm[j, 2] * tz)
            if a2 > a1 + ROLE_TIE_EPS or (abs(a2 - a1) <= ROLE_TIE_EPS and j < i):
                s, t = j, i
                tx, ty, tz = -tx, -ty, -tz
            else:
                s, t = i, j
            ux, uy, uz = nrm[s, 0], nrm[s, 1], nrm[s, 2]
            mx, my, mz = nrm[t, 0], nrm[t, 1], nrm[t, 2]
            vx = ty * uz - tz * uy
            vy = tz * ux - tx * uz
            vz = tx * uy - ty * ux
            v_norm = math.sqrt(vx * vx + vy * vy + vz * vz)
            if not v_norm >= DEGENERATE_FRAME_EPS:
                continue
            vx, vy, vz = vx / v_norm, vy / v_norm, vz / v_norm
            wx = uy * vz - uz * vy
            wy = uz * vx - ux * vz
            wz = ux * vy - uy * vx
            alpha = vx * mx + vy * my + vz * mz
            phi = ux * tx + uy * ty + uz * tz
            theta = math.atan2(wx * mx + wy * my + wz * mz, ux * mx + uy * my + uz * mz)
            # zero sits on a bin edge for even B; symmetric pairs give +-ulp residues
            if abs(alpha) <= ZERO_SNAP:
                alpha = 0.0
            if abs(phi) <= ZERO_SNAP:
                phi = 0.0
            if abs(theta) <= ZERO_SNAP:
                theta = 0.0
            b0 = min(max(int(math.floor((alpha + 1.0) / 2.0 * bins)), 0), bins - 1)
            b1 = min(max(int(math.floor((phi + 1.0) / 2.0 * bins)), 0), bins - 1)
            b2 = min(max(int(math.floor((theta + math.pi) / two_pi * bins)), 0), bins - 1)
            out[r, b0] += 1.0
            out[r, bins + b1] += 1.0
            out[r, 2 * bins + b2] += 1.0
    return out


def _spfh_counts(positions, normals, graph: NeighborGraph, bins: int, workers: int = 1):
    n = len(graph.indptr) - 1
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    nrm = np.ascontiguousarray(normals, dtype=np.float64)

    def run(bounds):
        return _spfh_kernel(graph.indptr, graph.indices, pos, nrm, bounds[0], bounds[1], bins)

    parts = _map_chunks(run, _row_chunks(graph, 1 << 22), workers)
    return np.vstack(parts) if parts else np.zeros((n, 3 * bins))


def _valid_subset(cloud: PointCloud, normals: NormalField, index: SpatialIndex):
    valid = np.asarray(normals.valid, dtype=bool)
    ids = np.flatnonzero(valid)
    if ids.size == 0:
        raise ParameterError("no point has a valid normal")
    if valid.all():
        return ids, cloud, normals.normals, index
    sub = cloud.subset(ids)
    sub_index = build_index(sub, k_max=index.k_max, workers=index.workers)
    return ids, sub, normals.normals[ids], sub_index


def _angle_layout(bins: int):
    return tuple(Block(name, bins) for name in ANGLE_BLOCKS)


def _check_common(r: float, bins: int):
    if not r > 0:
        raise ParameterError(f"radius must be positive, got {r}")
    if bins < 2:
        raise ParameterError(f"bin count must be >= 2, got {bins}")


def spfh(cloud: PointCloud, normals: NormalField, index: SpatialIndex, r: float,
         bins: int = DEFAULT_BINS, k_max: Optional[int] = None, workers: int = 1) -> FeatureMatrix:
    """Simplified point feature histograms (alpha | phi | theta), one row per valid point."""
    _check_common(r, bins)
    ids, sub, nrm, sub_index = _valid_subset(cloud, normals, index)
    graph = radius_graph(sub_index, r, k_max)
    hist, empty = _normalize_blocks(_spfh_counts(sub.positions, nrm, graph, bins, workers), 3)
    params = {"radius": float(r), "bins": bins, "normal_convention": normals.convention}
    return FeatureMatrix(hist, _angle_layout(bins), ids, empty, params)


def fpfh(cloud: PointCloud, normals: NormalField, index: SpatialIndex, r: float = 1.0,
         bins: int = DEFAULT_BINS, k_max: Optional[int] = None, workers: int = 1) -> FeatureMatrix:
    """Fast point feature histograms.

    FPFH(p) = SPFH(p) + 1/k * sum_i SPFH(p_i) / |p - p_i| over the k ball
    neighbours, each block re-normalized to unit mass afterwards.
    """
    _check_common(r, bins)
    ids, sub, nrm, sub_index = _valid_subset(cloud, normals, index)
    return _fpfh_on_subset(ids, sub, nrm, sub_index, normals.convention, r, bins, k_max, workers)


def _fpfh_on_subset(ids, sub, nrm, sub_index, convention, r, bins, k_max, workers):
    graph = radius_graph(sub_index, r, k_max)
    s, _ = _normalize_blocks(_spfh_counts(sub.positions, nrm, graph, bins, workers), 3)
    rows = _weighted_neighbour_sum(graph, s)
    hist, empty = _normalize_blocks(rows, 3)
    params = {"radius": float(r), "bins": bins, "normal_convention": convention}
    return FeatureMatrix(hist, _angle_layout(bins), ids, empty, params)


def _weighted_neighbour_sum(graph: NeighborGraph, s: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    counts = graph.counts
    dist = graph.distances
    with np.errstate(divide="ignore"):
        w = np.where(dist > 0, 1.0 / dist, 0.0) / np.repeat(np.maximum(counts, 1), counts)
    weights = sp.csr_matrix((w, graph.indices, graph.indptr), shape=(n, n))
    return s + weights @ s


def intensity_histogram(cloud: PointCloud, index: SpatialIndex, r: float,
                        bins: int = DEFAULT_BINS, relative: bool = False,
                        k_max: Optional[int] = None) -> FeatureMatrix:
    """Histogram of |I_c - I_j| over each point's ball neighbours, on [0, 1].

    With ``relative=True`` the difference is divided by I_c instead (values
    above 1 fall in the last bin; I_c = 0 maps any change to 1).
    """
    _check_common(r, bins)
    graph = radius_graph(index, r, k_max)
    n = len(cloud)
    inten = cloud.intensities
    ctr = graph.row_ids()
    diff = np.abs(inten[ctr] - inten[graph.indices])
    if relative:
        base = inten[ctr]
        with np.errstate(invalid="ignore", divide="ignore"):
            diff = np.where(base > 0, diff / base, np.where(diff > 0, 1.0, 0.0))
    b = bin_index(np.minimum(diff, 1.0), 0.0, 1.0, bins)
    counts = np.bincount(ctr * bins + b, minlength=n * bins).reshape(n, bins).astype(np.float64)
    hist, empty = _normalize_blocks(counts, 1)
    params = {"intensity_radius": float(r), "bins": bins, "relative_intensity": bool(relative)}
    return FeatureMatrix(hist, (Block("intensity", bins),), np.arange(n), empty, params)


def fuse_multimodal(geo: FeatureMatrix, inten: FeatureMatrix, weight: float = 1.0) -> FeatureMatrix:
    """Concatenate [FPFH blocks | weight * intensity block] row by row."""
    if len(geo) != len(inten):
        raise ParameterError(f"row counts differ: {len(geo)} geometric vs {len(inten)} intensity")
    if not np.array_equal(geo.point_ids, inten.point_ids):
        raise ParameterError("geometric and intensity features cover different points")
    if weight < 0:
        raise ParameterError("intensity weight must be non-negative")
    scaled = tuple(Block(b.name, b.bins, float(weight) * b.weight) for b in inten.layout)
    rows = np.hstack([geo.rows, float(weight) * inten.rows])
    params = {**geo.params, **inten.params, "intensity_weight": float(weight)}
    return FeatureMatrix(rows, geo.layout + scaled, geo.point_ids,
                         np.hstack([geo.empty, inten.empty]), params)


def extract_features(cloud: PointCloud, normals: NormalField, index: SpatialIndex,
                     mode: str = "multi", radius: float = 1.0,
                     intensity_radius: Optional[float] = None, bins: int = DEFAULT_BINS,
                     weight: float = 1.0, relative_intensity: bool = False,
                     k_max: Optional[int] = None, workers: int = 1) -> FeatureMatrix:
    """Descriptor rows for every valid-normal point in the requested mode."""
    if mode not in FEATURE_MODES:
        raise ParameterError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    intensity_radius = radius if intensity_radius is None else intensity_radius
    _check_common(radius, bins)
    ids, sub, nrm, sub_index = _valid_subset(cloud, normals, index)
    if mode == "intensity":
        inten = intensity_histogram(sub, sub_index, intensity_radius, bins, relative_intensity, k_max)
        inten.point_ids = ids
        inten.params["mode"] = mode
        return inten
    geo = _fpfh_on_subset(ids, sub, nrm, sub_index, normals.convention, radius, bins, k_max, workers)
    if mode == "fpfh":
        geo.params["mode"] = mode
        return geo
    inten = intensity_histogram(sub, sub_index, intensity_radius, bins, relative_intensity, k_max)
    inten.point_ids = ids
    fused = fuse_multimodal(geo, inten, weight)
    fused.params["mode"] = mode
    return fused
