"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
"""

import json
import os
import subprocess
import sys
import textwrap
import time
from itertools import product

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import make_cloud
from oracles import brute_ball, coverage_radius, exhaustive_nn, optimal_coverage
from multifpfhi.cli import main
from multifpfhi.config import defaults_for, replace_config
from multifpfhi.core import LABEL_CODES, build_index, ball_query, estimate_normals
from multifpfhi.eval import evaluate, kde
from multifpfhi.features import Block, FeatureMatrix, extract_features, intensity_histogram
from multifpfhi.io import read_kde_csv
from multifpfhi.patchcore import build_memory, score
from multifpfhi.pipeline import build_bank, compute_features, detect, prepare
from multifpfhi.synthgen import generate, preset

pytestmark = pytest.mark.slow


def as_matrix(rows):
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    return FeatureMatrix(rows, (Block("x", rows.shape[1]),), np.arange(n), np.zeros((n, 1), dtype=bool))


# -- 1. plane concentration -----------------------------------------------------------

def test_criterion_1_plane_concentration(criterion):
    t0 = time.perf_counter()
    n = 100
    g = np.arange(n) * 0.05
    x, y = np.meshgrid(g, g, indexing="ij")
    cloud = make_cloud(np.column_stack([x.ravel(), y.ravel(), np.zeros(n * n)]), np.zeros(n * n))
    index = build_index(cloud, k_max=n * n)   # r = 1 m holds ~1250 neighbours; no cap
    normals = estimate_normals(cloud, index, 0.12)
    f = extract_features(cloud, normals, index, mode="fpfh", radius=1.0, bins=30, k_max=n * n)
    elapsed = time.perf_counter() - t0
    assert len(f) == n * n
    # the bin containing 0 is 15 for [-1, 1] and [-pi, pi] split into 30 half-open bins
    zero_bin = 15
    mass = np.stack([f.rows[:, f.block_slice(name)][:, zero_bin] for name in ("alpha", "phi", "theta")])
    worst = float(mass.min())
    ok = worst >= 0.999 and elapsed < 30.0
    criterion(1, ok, f"min zero-bin mass {worst:.6f} (>= 0.999), runtime {elapsed:.1f} s (< 30 s)")
    assert ok


# -- 2. rotation invariance -----------------------------------------------------------

def test_criterion_2_rotation_invariance(criterion):
    rng = np.random.default_rng(2024)
    u, v = rng.uniform(-1, 1, (2, 5000))
    pos = np.column_stack([u, v, 0.2 * np.sin(3 * u) + 0.1 * v * v])
    rot = Rotation.random(random_state=11).as_matrix()
    shift = np.array([3.0, -1.0, 0.5])
    viewpoint = np.array([0.0, 0.0, 4.0])
    rows = []
    for p, vp in ((pos, viewpoint), (pos @ rot.T + shift, rot @ viewpoint + shift)):
        c = make_cloud(p, np.zeros(len(p)))
        idx = build_index(c)
        nf = estimate_normals(c, idx, 0.2, viewpoint=vp)
        rows.append(extract_features(c, nf, idx, mode="fpfh", radius=0.3).rows)
    diff = float(np.abs(rows[0] - rows[1]).max())
    ok = rows[0].shape == rows[1].shape and diff < 1e-6
    criterion(2, ok, f"max |FPFH - FPFH(rotated)| = {diff:.3e} (< 1e-6) over {rows[0].shape[0]} points")
    assert ok


# -- 3. intensity feature ---------------------------------------------------------------

def test_criterion_3_intensity_feature(criterion):
    rng = np.random.default_rng(3)
    uniform = make_cloud(rng.uniform(size=(500, 3)), np.full(500, 0.42))
    h = intensity_histogram(uniform, build_index(uniform), 0.2, bins=30)
    valid = ~h.empty[:, 0]
    uniform_ok = bool(valid.all()) and bool(np.all(h.rows[:, 0] == 1.0))
    # far anchors pin the min-max span so the three intensities stay 0.5, 0.1, 0.9
    pos = [[0, 0, 0], [0.1, 0, 0], [-0.1, 0, 0], [50, 0, 0], [-50, 0, 0]]
    three = make_cloud(pos, [0.5, 0.1, 0.9, 0.0, 1.0])
    row = intensity_histogram(three, build_index(three), 0.15, bins=30).rows[0]
    example_ok = row[12] == 1.0 and row.sum() == 1.0
    ok = uniform_ok and example_ok
    criterion(3, ok, f"uniform cloud all mass in bin 0: {uniform_ok}; 3-point example bin 12 mass {row[12]}")
    assert ok


# -- 4. oracle equivalence ----------------------------------------------------------------

def test_criterion_4_oracle_equivalence(criterion):
    rng = np.random.default_rng(4)
    score_ok = True
    for n, kind in product((1, 17, 500, 2000), ("gauss", "histogram")):
        if kind == "gauss":
            x, y = rng.normal(size=(n, 64)), rng.normal(size=(n, 64))
        else:
            x = rng.dirichlet(np.full(30, 0.3), size=(n, 4)).reshape(n, 120)
            y = rng.dirichlet(np.full(30, 0.3), size=(n, 4)).reshape(n, 120)
        bank = build_memory(as_matrix(x), m=n, seed=0)
        res = score(as_matrix(y), bank)
        d, arg = exhaustive_nn(y, bank.features)
        score_ok &= res.min_dists.tobytes() == d.tobytes() and np.array_equal(res.nearest_bank_id, arg)

    pos = rng.uniform(0, 1, (10_000, 3))
    idx = build_index(make_cloud(pos), k_max=10_000)
    r = 0.08
    ball_ok = True
    for c in range(10_000):
        diff = pos - pos[c]
        d = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2)
        hit = np.flatnonzero(d <= r)
        hit = hit[hit != c]
        expected = hit[np.lexsort((hit, d[hit]))]
        if not np.array_equal(ball_query(idx, c, r), expected):
            ball_ok = False
            break
    for c in range(0, 10_000, 997):   # scalar-loop oracle on a sample of centres
        ball_ok &= ball_query(idx, c, r).tolist() == brute_ball(pos, c, r)
    ok = bool(score_ok and ball_ok)
    criterion(4, ok, f"score() bitwise equal to exhaustive NN (N <= 2000): {bool(score_ok)}; "
                     f"ball_query equal to brute force on 10^4 points: {bool(ball_ok)}")
    assert ok


# -- 5. coreset properties ----------------------------------------------------------------

def test_criterion_5_coreset_properties(criterion):
    rng = np.random.default_rng(5)
    full_ok = True
    for n, m in ((1, 1), (7, 7), (40, 40), (40, 100)):
        x = rng.normal(size=(n, 6))
        bank = build_memory(as_matrix(x), m=m, seed=1)
        full_ok &= sorted(bank.selected.tolist()) == list(range(n))
        full_ok &= sorted(map(tuple, bank.features)) == sorted(map(tuple, x))

    mono_ok = True
    for seed in range(3):
        x = np.random.default_rng(seed).normal(size=(150, 8))
        radii = [coverage_radius(x, build_memory(as_matrix(x), m=m, seed=seed).selected)
                 for m in range(1, 151)]
        mono_ok &= all(b <= a for a, b in zip(radii, radii[1:])) and radii[-1] == 0.0

    worst_ratio, instances = 0.0, 0
    for n in range(1, 13):
        for m in range(1, min(4, n) + 1):
            for seed in range(6):
                g = np.random.default_rng(1000 * n + 10 * m + seed)
                # alternate continuous points with small integer grids that force distance ties
                x = g.normal(size=(n, 3)) if seed % 2 == 0 else g.integers(0, 3, size=(n, 2)).astype(float)
                greedy = coverage_radius(x, build_memory(as_matrix(x), m=m, seed=seed).selected)
                best = optimal_coverage(x, m)
                instances += 1
                if best == 0:
                    worst_ratio = max(worst_ratio, 0.0 if greedy == 0 else np.inf)
                else:
                    worst_ratio = max(worst_ratio, greedy / best)
    approx_ok = worst_ratio <= 2.0
    ok = bool(full_ok and mono_ok and approx_ok)
    criterion(5, ok, f"m >= N reproduces set: {bool(full_ok)}; coverage non-increasing: {bool(mono_ok)}; "
                     f"worst greedy/optimal {worst_ratio:.3f} (<= 2) over {instances} instances")
    assert ok


# -- 6. modality separation -----------------------------------------------------------------

def _run_modes(name):
    spec = preset(name)
    pair = generate(spec)
    out = {}
    for mode in ("fpfh", "multi"):
        cfg = replace_config(defaults_for(spec.scene_class), feature_mode=mode)
        ref, tst = prepare(pair.reference, cfg), prepare(pair.test, cfg)
        bank = build_bank(compute_features(ref, cfg, spec.scanner_position()), cfg)
        result = detect(tst, compute_features(tst, cfg, spec.scanner_position()), bank)
        out[mode] = (result, tst.labels, evaluate(result, tst.labels, cfg.thresholds, cfg.kde_grid))
    return out


def _mean_score(result, labels, code):
    return float(result.scores[labels == code].mean())


def test_criterion_6_modality_separation(criterion):
    water = _run_modes("water_only")
    wcode, ncode = LABEL_CODES["water_patch"], LABEL_CODES["none"]
    fp_res, fp_lab, _ = water["fpfh"]
    mu_res, mu_lab, _ = water["multi"]
    fpfh_gap = _mean_score(fp_res, fp_lab, wcode) - _mean_score(fp_res, fp_lab, ncode)
    multi_gap = _mean_score(mu_res, mu_lab, wcode) - _mean_score(mu_res, mu_lab, ncode)

    arch = _run_modes("arch_x_move")
    f1_fpfh = arch["fpfh"][2].f1(0.3)
    f1_multi = arch["multi"][2].f1(0.3)
    groups = arch["multi"][2].groups
    extrados_mu, non_crack_mu = groups["extrados"].mean, groups["non_crack"].mean

    checks = {
        "water fpfh |gap| < 0.05": abs(fpfh_gap) < 0.05,
        "water multi gap >= 0.2": multi_gap >= 0.2,
        "arch_x_move F1@0.3 multi >= fpfh": f1_multi >= f1_fpfh,
        "arch_x_move extrados mu > non-crack mu (multi)": extrados_mu > non_crack_mu,
    }
    ok = all(checks.values())
    detail = (f"water gap fpfh {fpfh_gap:+.4f}, multi {multi_gap:+.4f}; arch_x_move F1@0.3 "
              f"multi {f1_multi:.4f} vs fpfh {f1_fpfh:.4f}; extrados mu {extrados_mu:.5f} vs "
              f"non-crack mu {non_crack_mu:.5f}")
    failed = [k for k, v in checks.items() if not v]
    criterion(6, ok, detail + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# -- 7 and 8. determinism and KDE normalisation ---------------------------------------------

@pytest.fixture(scope="module")
def worker_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    dirs = []
    for workers in (1, 2):
        out = str(base / f"workers{workers}")
        code = main(["pipeline", "--preset", "arch_x_move", "--seed", "3", "--workers", str(workers),
                     "--out", out])
        assert code == 0
        dirs.append(out)
    return dirs


def test_criterion_7_determinism(criterion, worker_runs):
    same = {}
    for name in ("scores.csv", "report.txt"):
        a, b = (open(os.path.join(d, name), "rb").read() for d in worker_runs)
        same[name] = a == b and len(a) > 0
    ok = all(same.values())
    criterion(7, ok, "workers 1 vs 2 byte-identical: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok


def test_criterion_8_kde_normalisation(criterion, worker_runs):
    integrals = []
    for d in worker_runs:
        for name in sorted(os.listdir(d)):
            if name.startswith("kde_") and name.endswith(".csv"):
                grid, density = read_kde_csv(os.path.join(d, name))
                integrals.append(float(np.trapezoid(density, grid)))
    emitted = len(integrals)
    rng = np.random.default_rng(8)
    samples = [rng.normal(size=2), np.array([0.0, 1e-9]), rng.exponential(size=50),
               rng.standard_cauchy(size=1000), np.r_[rng.normal(size=500), 40 + rng.normal(size=5)],
               np.r_[np.zeros(900), rng.uniform(size=3)], rng.uniform(size=100_000)]
    for s in samples:
        c = kde(s)
        integrals.append(float(np.trapezoid(c.density, c.grid)))
    worst = max(abs(v - 1.0) for v in integrals)
    ok = emitted > 0 and worst <= 1e-3
    criterion(8, ok, f"max |integral - 1| = {worst:.2e} (<= 1e-3) over {emitted} emitted curves "
                     f"and {len(samples)} stress samples")
    assert ok


# -- 9. desk-scale performance ------------------------------------------------------------

_PERF_SCRIPT = textwrap.dedent("""
    import json, resource, sys, time
    from multifpfhi.config import defaults_for
    from multifpfhi.pipeline import run_pipeline
    from multifpfhi.synthgen import generate, preset
    spec = preset("arch_x_move")
    spec.spacing = 0.0068
    t0 = time.perf_counter()
    pair = generate(spec)
    run_pipeline(pair.reference, pair.test, defaults_for(spec.scene_class), sys.argv[1],
                       spec.scanner_position())
    elapsed = time.perf_counter() - t0
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    print(json.dumps({"n_ref": len(pair.reference), "n_test": len(pair.test), "seconds": elapsed,
                      "max_rss": rss}))
""")


def test_criterion_9_desk_scale_performance(criterion, tmp_path):
    proc = subprocess.run([sys.executable, "-c", _PERF_SCRIPT, str(tmp_path / "perf")],
                          capture_output=True, text=True, timeout=1200)
    assert proc.returncode == 0, proc.stderr
    stats = json.loads(proc.stdout.strip().splitlines()[-1])
    gb = stats["max_rss"] / 2**30
    ok = stats["n_ref"] >= 200_000 and stats["n_test"] >= 200_000 and stats["seconds"] < 120 and gb < 4
    criterion(9, ok, f"{stats['n_ref']} + {stats['n_test']} points, bank m = 4000: "
                     f"{stats['seconds']:.1f} s (< 120 s), peak RSS {gb:.2f} GB (< 4 GB)")
    assert ok
    assert os.path.exists(tmp_path / "perf" / "report.txt")


# -- 10. released dataset (optional) -------------------------------------------------------

def test_criterion_10_released_dataset(criterion):
    criterion(10, None, "optional, needs the original released dataset (not available offline)")
    pytest.skip("optional criterion: released dataset not available")
