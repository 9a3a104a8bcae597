import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from conftest import grid_plane, make_cloud
from oracles import brute_ball
from multifpfhi.core import (LABEL_CODES, PointCloud, ball_query, build_index, estimate_normals,
                             normalize_intensity, radius_graph, voxel_downsample)
from multifpfhi.errors import ParameterError


# -- PointCloud -----------------------------------------------------------------

def test_from_raw_min_max_normalizes():
    c = make_cloud(np.zeros((3, 3)) + np.arange(3)[:, None], [10.0, 20.0, 30.0])
    np.testing.assert_array_equal(c.intensities, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(c.raw_intensities, [10.0, 20.0, 30.0])


def test_constant_intensity_normalizes_to_zero():
    np.testing.assert_array_equal(normalize_intensity(np.full(4, 7.0)), np.zeros(4))


@pytest.mark.parametrize("positions, intensities", [
    (np.zeros((0, 3)), np.zeros(0)),
    (np.zeros((2, 2)), np.zeros(2)),
    (np.array([[0, 0, np.nan]]), np.zeros(1)),
    (np.zeros((2, 3)), np.zeros(3)),
])
def test_cloud_rejects_bad_shapes_and_values(positions, intensities):
    with pytest.raises(ParameterError):
        PointCloud.from_raw(positions, intensities)


def test_cloud_arrays_are_read_only():
    c = make_cloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.positions[0, 0] = 1.0


def test_labels_accept_names():
    c = make_cloud(np.zeros((2, 3)), labels=["none", "water_patch"])
    np.testing.assert_array_equal(c.labels, [0, LABEL_CODES["water_patch"]])
    with pytest.raises(ParameterError):
        make_cloud(np.zeros((1, 3)), labels=["puddle"])


# -- voxel_downsample -------------------------------------------------------------

def test_voxel_single_point_is_unchanged():
    c = make_cloud([[0.3, -1.2, 5.0]], [0.7])
    d = voxel_downsample(c, 0.37)
    np.testing.assert_array_equal(d.positions, c.positions)


def test_voxel_cube_corners_collapse_to_centroid():
    corners = np.array(list(np.ndindex(2, 2, 2)), dtype=float)
    raw = np.arange(8, dtype=float)
    d = voxel_downsample(make_cloud(corners, raw), 2.0)
    assert len(d) == 1
    np.testing.assert_allclose(d.positions[0], [0.5, 0.5, 0.5])
    assert d.raw_intensities[0] == pytest.approx(raw.mean())
    assert d.intensities[0] == pytest.approx(make_cloud(corners, raw).intensities.mean())


def test_voxel_label_vote_prefers_anomaly_on_ties():
    pos = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.02, 0, 0], [0.03, 0, 0]])
    d = voxel_downsample(make_cloud(pos, labels=[0, 0, 2, 2]), 1.0)
    assert d.labels.tolist() == [2]
    d = voxel_downsample(make_cloud(pos, labels=[0, 0, 0, 4]), 1.0)
    assert d.labels.tolist() == [0]


def test_voxel_rejects_nonpositive_size():
    with pytest.raises(ParameterError):
        voxel_downsample(make_cloud(np.zeros((1, 3))), 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), size=st.floats(0.05, 0.5))
def test_voxel_downsample_is_idempotent(seed, size):
    pos = np.random.default_rng(seed).uniform(-1, 1, (300, 3))
    once = voxel_downsample(make_cloud(pos), size)
    twice = voxel_downsample(once, size)
    assert len(twice) == len(once)


# -- ball queries -----------------------------------------------------------------

def test_single_point_ball_is_empty():
    idx = build_index(make_cloud([[1.0, 2.0, 3.0]]))
    assert ball_query(idx, 0, 5.0).size == 0


def test_radius_zero_is_empty():
    idx = build_index(make_cloud(np.zeros((3, 3))))
    assert ball_query(idx, 0, 0.0).size == 0


def test_ball_boundary_is_inclusive():
    idx = build_index(make_cloud([[0, 0, 0], [1.0, 0, 0]]))
    assert ball_query(idx, 0, 0.5).tolist() == []
    assert ball_query(idx, 0, 1.0).tolist() == [1]


def test_ball_query_rejects_bad_center():
    idx = build_index(make_cloud(np.zeros((2, 3))))
    with pytest.raises(ParameterError):
        ball_query(idx, 2, 1.0)


def test_ball_query_matches_brute_force_1000(rng):
    pos = rng.uniform(0, 1, (1000, 3))
    idx = build_index(make_cloud(pos))
    for _ in range(50):
        c = int(rng.integers(1000))
        r = float(rng.uniform(0.01, 0.4))
        assert ball_query(idx, c, r, k_max=10**6).tolist() == brute_ball(pos, c, r)


def test_ball_query_cap_keeps_nearest(rng):
    pos = rng.uniform(0, 1, (400, 3))
    idx = build_index(make_cloud(pos), k_max=7)
    for c in range(0, 400, 37):
        assert ball_query(idx, c, 0.6).tolist() == brute_ball(pos, c, 0.6, k_max=7)


def test_radius_graph_rows_match_brute_force(rng):
    pos = rng.uniform(0, 1, (600, 3))
    pos[:50] = np.round(pos[:50] * 4) / 4  # duplicate distances exercise tie order
    for k_max in (5, 1024):
        g = radius_graph(build_index(make_cloud(pos)), 0.3, k_max)
        for i in range(0, 600, 11):
            assert g.row(i).tolist() == brute_ball(pos, i, 0.3, k_max)


def test_radius_graph_independent_of_chunking(rng):
    pos = rng.uniform(0, 1, (500, 3))
    a = radius_graph(build_index(make_cloud(pos)), 0.25, 64, chunk=2048)
    b = radius_graph(build_index(make_cloud(pos)), 0.25, 64, chunk=17)
    np.testing.assert_array_equal(a.indptr, b.indptr)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.distances, b.distances)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), r=st.floats(0.0, 0.8), n=st.integers(1, 120))
def test_ball_query_property_equals_brute_force(seed, r, n):
    pos = np.random.default_rng(seed).uniform(0, 1, (n, 3))
    idx = build_index(make_cloud(pos))
    c = seed % n
    expected = brute_ball(pos, c, r) if r > 0 else []
    assert ball_query(idx, c, r, k_max=10**6).tolist() == expected


# -- normals --------------------------------------------------------------------

def test_plane_normals_are_plus_z():
    c = make_cloud(grid_plane(20, 0.05))
    nf = estimate_normals(c, build_index(c), 0.12)
    assert nf.valid.all()
    assert np.abs(nf.normals - [0.0, 0.0, 1.0]).max() <= 1e-9


def test_isolated_point_normal_is_invalid():
    pos = np.vstack([grid_plane(5, 0.05), [[10.0, 10.0, 10.0]]])
    c = make_cloud(pos)
    nf = estimate_normals(c, build_index(c), 0.12)
    assert not nf.valid[-1]
    assert nf.valid[:-1].all()


def test_cylinder_normals_point_to_axis():
    radius, spacing = 1.375, 0.01
    n_ang = int(round(2 * math.pi * radius / spacing))
    ang = np.arange(n_ang) * 2 * math.pi / n_ang
    ys = np.arange(0.0, 0.5, spacing)
    a, y = np.meshgrid(ang, ys, indexing="ij")
    a, y = a.ravel(), y.ravel()
    pos = np.column_stack([radius * np.cos(a), y, radius * np.sin(a)])
    c = make_cloud(pos)
    nf = estimate_normals(c, build_index(c), 0.12, viewpoint=(0.0, 0.25, 0.0))
    radial = -np.column_stack([np.cos(a), np.zeros_like(a), np.sin(a)])
    dots = np.sum(nf.normals * radial, axis=1)
    assert nf.valid.all()
    assert dots.min() > 0.9999
    # within r of the open ends the ball is one-sided and PCA tilts slightly
    interior = (y >= 0.12) & (y <= ys[-1] - 0.12)
    assert dots[interior].min() >= 1 - 1e-6
    assert nf.convention.startswith("viewpoint:")


def test_normals_have_unit_norm(rng):
    pos = rng.normal(size=(500, 3))
    c = make_cloud(pos)
    nf = estimate_normals(c, build_index(c), 0.5)
    norms = np.linalg.norm(nf.normals[nf.valid], axis=1)
    assert np.abs(norms - 1).max() <= 1e-9


def test_normals_rotation_equivariant(rng):
    u, v = rng.uniform(-1, 1, (2, 2000))
    pos = np.column_stack([u, v, 0.3 * np.sin(2 * u) * np.cos(v)])
    rot = Rotation.from_euler("xyz", [0.3, -0.7, 1.1]).as_matrix()
    c0, c1 = make_cloud(pos), make_cloud(pos @ rot.T)
    n0 = estimate_normals(c0, build_index(c0), 0.2, viewpoint=(0, 0, 5))
    n1 = estimate_normals(c1, build_index(c1), 0.2, viewpoint=rot @ np.array([0, 0, 5.0]))
    np.testing.assert_array_equal(n0.valid, n1.valid)
    diff = np.abs(n0.normals @ rot.T - n1.normals)
    assert diff.max() < 1e-6
