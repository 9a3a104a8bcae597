"""Point-cloud container, voxel downsampling, radius search and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError

LABEL_NAMES = ("none", "intrados_crack", "extrados_crack", "inner_crack", "water_patch")
LABEL_CODES = {name: code for code, name in enumerate(LABEL_NAMES)}

DEFAULT_K_MAX = 1024


def label_codes(labels: Sequence) -> np.ndarray:
    """Convert label names or integer codes to an int8 code array."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "iu":
        codes = arr.astype(np.int8)
    else:
        try:
            codes = np.array([LABEL_CODES[str(v)] for v in arr], dtype=np.int8)
        except KeyError as exc:
            raise ParameterError(f"unknown label {exc.args[0]!r}") from None
    if codes.size and (codes.min() < 0 or codes.max() >= len(LABEL_NAMES)):
        raise ParameterError("label code out of range")
    return codes


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant channel maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if not hi - lo > 0:
        return np.zeros_like(raw)
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions (N, 3) in metres, raw and [0, 1]-normalized intensities, optional labels.

    Use :meth:`from_raw` to build a cloud from sensor values; the plain
    constructor expects the normalized channel to be supplied already.
    """

    positions: np.ndarray
    intensities: np.ndarray
    raw_intensities: np.ndarray
    labels: Optional[np.ndarray] = None
    frame_id: str = ""

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        inten = np.ascontiguousarray(self.intensities, dtype=np.float64)
        raw = np.ascontiguousarray(self.raw_intensities, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ParameterError(f"positions must have shape (N, 3), got {pos.shape}")
        n = pos.shape[0]
        if n < 1:
            raise ParameterError("a point cloud needs at least one point")
        if inten.shape != (n,) or raw.shape != (n,):
            raise ParameterError("intensities must have one value per point")
        if not (np.isfinite(pos).all() and np.isfinite(inten).all() and np.isfinite(raw).all()):
            raise ParameterError("non-finite coordinates or intensities")
        if inten.min() < 0.0 or inten.max() > 1.0:
            raise ParameterError("normalized intensities must lie in [0, 1]")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(label_codes(labels))
            if labels.shape != (n,):
                raise ParameterError("labels must have one value per point")
            labels.setflags(write=False)
        for arr in (pos, inten, raw):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "raw_intensities", raw)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_raw(cls, positions, intensities, labels=None, frame_id: str = "") -> "PointCloud":
        raw = np.asarray(intensities, dtype=np.float64)
        return cls(positions, normalize_intensity(raw), raw, labels, frame_id)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, ids: np.ndarray) -> "PointCloud":
        ids = np.asarray(ids)
        labels = None if self.labels is None else self.labels[ids]
        return PointCloud(self.positions[ids], self.intensities[ids],
                          self.raw_intensities[ids], labels, self.frame_id)


@dataclass(frozen=True, eq=False)
class NormalField:
    normals: np.ndarray
    valid: np.ndarray
    convention: str = "+z"


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """CSR neighbourhoods: row ``i`` owns ``indices[indptr[i]:indptr[i+1]]``.

    Rows are ordered by distance and never contain the row point itself.
    """

    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    radius: float
    k_max: int

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.indptr) - 1), self.counts)


@dataclass(eq=False)
class SpatialIndex:
    """k-d tree over a cloud's positions. Immutable; graphs are memoised per (r, k_max)."""

    cloud: PointCloud
    tree: cKDTree
    k_max: int = DEFAULT_K_MAX
    workers: int = 1
    _graphs: dict = field(default_factory=dict, repr=False)

    @property
    def positions(self) -> np.ndarray:
        return self.cloud.positions

    def __len__(self) -> int:
        return len(self.cloud)

    def clear_cache(self) -> None:
        self._graphs.clear()


def point_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance row by row; the single definition used for radius tests."""
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    The grid is anchored at ``floor(bbox_min / voxel_size) * voxel_size``.
    Intensities are averaged (both channels); labels use a majority vote in
    which any anomalous label beats ``none`` on ties.
    """
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    pos = cloud.positions
    origin = np.floor(pos.min(axis=0) / voxel_size) * voxel_size
    keys = np.floor((pos - origin) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = counts.shape[0]

    def mean(values):
        return np.bincount(inverse, weights=values, minlength=m) / counts

    centroids = np.column_stack([mean(pos[:, k]) for k in range(3)])
    inten = np.clip(mean(cloud.intensities), 0.0, 1.0)
    raw = mean(cloud.raw_intensities)
    labels = None
    if cloud.labels is not None:
        n_lab = len(LABEL_NAMES)
        votes = np.bincount(inverse * n_lab + cloud.labels, minlength=m * n_lab).reshape(m, n_lab)
        # anomalous columns first so argmax resolves ties in their favour
        order = np.r_[np.arange(1, n_lab), 0]
        labels = order[np.argmax(votes[:, order], axis=1)].astype(np.int8)
    return PointCloud(centroids, inten, raw, labels, cloud.frame_id)


def build_index(cloud: PointCloud, k_max: int = DEFAULT_K_MAX, workers: int = 1) -> SpatialIndex:
    if k_max < 1:
        raise ParameterError("k_max must be >= 1")
    return SpatialIndex(cloud, cKDTree(cloud.positions),
                        k_max=k_max, workers=workers)


def _check_center(index: SpatialIndex, center_id: int) -> int:
    n = len(index)
    if not (0 <= int(center_id) < n) or int(center_id) != center_id:
        raise ParameterError(f"center_id {center_id} out of range for {n} points")
    return int(center_id)


def _exact_ball(index: SpatialIndex, center: int, r: float):
    """All j != center within r, sorted by (distance, index)."""
    pos = index.positions
    cand = np.asarray(index.tree.query_ball_point(pos[center], r * (1 + 1e-9) + 1e-12), dtype=np.int64)
    cand = cand[cand != center]
    d = point_distances(pos[cand], pos[center])
    keep = d <= r
    cand, d = cand[keep], d[keep]
    order = np.lexsort((cand, d))
    return cand[order], d[order]


def ball_query(index: SpatialIndex, center_id: int, r: float, k_max: Optional[int] = None) -> np.ndarray:
    """Ids of all points within ``r`` of ``center_id`` (inclusive, self excluded).

    At most ``k_max`` ids are returned, keeping the nearest; equal distances
    are resolved by lower index.
    """
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    center = _check_center(index, center_id)
    k_max = index.k_max if k_max is None else k_max
    if r == 0:
        return np.empty(0, dtype=np.int64)
    ids, _ = _exact_ball(index, center, r)
    return ids[:k_max]


def radius_graph(index: SpatialIndex, r: float, k_max: Optional[int] = None,
                 chunk: int = 2048) -> NeighborGraph:
    """Capped ball query for every point at once, as a CSR graph."""
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    k_max = index.k_max if k_max is None else int(k_max)
    key = (float(r), k_max)
    cached = index._graphs.get(key)
    if cached is not None:
        return cached

    n = len(index)
    counts = np.zeros(n, dtype=np.int64)
    idx_parts, dist_parts = [], []
    if r > 0 and n > 1:
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            cnt, ids, dists = _graph_chunk(index, np.arange(start, stop), r, k_max)
            counts[start:stop] = cnt
            idx_parts.append(ids)
            dist_parts.append(dists)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int32)
    distances = np.concatenate(dist_parts) if dist_parts else np.empty(0)
    graph = NeighborGraph(indptr, indices, distances, float(r), k_max)
    index._graphs[key] = graph
    return graph


def _knn_within(index: SpatialIndex, rows: np.ndarray, k: int, r_search: float):
    _, cand = index.tree.query(index.positions[rows], k=k, distance_upper_bound=r_search,
                               workers=index.workers)
    return np.asarray(cand).reshape(len(rows), k)


def _graph_chunk(index: SpatialIndex, rows: np.ndarray, r: float, k_max: int):
    """Neighbour lists for ``rows``: (counts, flat int32 ids, flat distances)."""
    pos = index.positions
    n = len(index)
    r_search = r * (1 + 1e-9) + 1e-12
    # self + cap + a pad so ulp-level disagreements with the tree cannot drop a neighbour
    k_cap = min(n, k_max + 1 + 16)
    # size the first pass from a sample of ball counts; stragglers jump straight to the cap
    probe = index.tree.query_ball_point(pos[rows[::32]], r_search, return_length=True)
    k = int(min(k_cap, 1.25 * int(np.max(probe)) + 16))
    cand = _knn_within(index, rows, k, r_search)
    while k < k_cap:
        grow = cand[:, -1] < n
        if not grow.any():
            break
        k = k_cap
        wider = np.full((len(rows), k), n, dtype=cand.dtype)
        wider[:, :cand.shape[1]] = cand
        wider[grow] = _knn_within(index, rows[grow], k, r_search)
        cand = wider

    present = cand < n
    safe = np.where(present, cand, 0)
    d_all = point_distances(pos[safe], pos[rows][:, None, :])
    ok = present & (safe != rows[:, None]) & (d_all <= r)
    truncated = present[:, -1] & (k < n)
    n_ok = ok.sum(axis=1)
    keep = ok & ~truncated[:, None]
    fallback = truncated & (n_ok <= k_max)

    capped = n_ok > k_max
    if capped.any():
        d = np.where(ok[capped], d_all[capped], np.inf)
        d_k = np.partition(d, k_max - 1, axis=1)[:, k_max - 1]
        within = d <= d_k[:, None]
        d_last = np.where(present[capped], d_all[capped], -np.inf).max(axis=1)
        clean = (within.sum(axis=1) == k_max) & (~truncated[capped] | (d_k < d_last * (1 - 1e-9)))
        keep[capped] = within & clean[:, None]
        fallback[np.flatnonzero(capped)[~clean]] = True

    counts = keep.sum(axis=1)
    if not fallback.any():
        return counts, *_sort_rows(counts, cand[keep].astype(np.int32), d_all[keep])
    # ties at the cap or candidate lists cut short: resolve on the exact ball
    ids_out, d_out = [], []
    for i, row in enumerate(rows):
        if fallback[i]:
            limit = r
            if capped[i]:
                limit = np.partition(d_all[i][ok[i]], k_max - 1)[k_max - 1]
            full_ids, full_d = _exact_ball(index, int(row), float(limit))
            full_ids, full_d = full_ids[:k_max], full_d[:k_max]
            counts[i] = len(full_ids)
        else:
            full_ids, full_d = cand[i][keep[i]], d_all[i][keep[i]]
        ids_out.append(full_ids)
        d_out.append(full_d)
    return counts, *_sort_rows(counts, np.concatenate(ids_out).astype(np.int32), np.concatenate(d_out))


def _sort_rows(counts: np.ndarray, ids: np.ndarray, d: np.ndarray):
    """Order each CSR row by (distance, id).

    The tree already returns rows nearly sorted, so only rows with an
    inversion (ties, or ulp-level disagreement with the exact distance) are sorted.
    """
    row_of = np.repeat(np.arange(counts.size), counts)
    same = row_of[1:] == row_of[:-1]
    bad = same & ((d[1:] < d[:-1]) | ((d[1:] == d[:-1]) & (ids[1:] < ids[:-1])))
    if bad.any():
        sub = np.flatnonzero(np.isin(row_of, row_of[1:][bad]))
        order = np.lexsort((ids[sub], d[sub], row_of[sub]))
        ids[sub] = ids[sub][order]
        d[sub] = d[sub][order]
    return ids, d


def estimate_normals(cloud: PointCloud, index: SpatialIndex, r: float = 0.12,
                     viewpoint: Optional[Sequence[float]] = None,
                     k_max: Optional[int] = None) -> NormalField:
    """PCA normals: smallest-eigenvalue eigenvector of each neighbourhood covariance.

    Neighbourhoods include the point itself; fewer than 3 members marks the
    point invalid. Normals face ``viewpoint`` when given, otherwise +z.
    """
    if not r > 0:
        raise ParameterError(f"normal radius must be positive, got {r}")
    n = len(cloud)
    graph = radius_graph(index, r, k_max)
    members = graph.counts + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(members, out=indptr[1:])
    idx = np.insert(graph.indices.astype(np.int64), graph.indptr[:-1], np.arange(n))
    pts = cloud.positions[idx]
    starts = indptr[:-1]
    centroid = np.add.reduceat(pts, starts, axis=0) / members[:, None]
    diff = pts - np.repeat(centroid, members, axis=0)
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.add.reduceat(diff[:, a] * diff[:, b], starts) / members
            cov[:, a, b] = s
            cov[:, b, a] = s
    valid = members >= 3
    normals = np.zeros((n, 3))
    if valid.any():
        _, vecs = np.linalg.eigh(cov[valid])
        nv = vecs[:, :, 0]
        nv = nv / np.linalg.norm(nv, axis=1, keepdims=True)
        normals[valid] = nv
    if viewpoint is None:
        facing = normals[:, 2]
        convention = "+z"
    else:
        vp = np.asarray(viewpoint, dtype=np.float64)
        facing = np.sum(normals * (vp - cloud.positions), axis=1)
        convention = "viewpoint:" + ",".join(repr(float(v)) for v in vp)
    normals[facing < 0] *= -1.0
    normals.setflags(write=False)
    valid.setflags(write=False)
    return NormalField(normals, valid, convention)
