"""End-to-end orchestration: downsample, normals, features, bank, score, report."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import io as mio
from .config import RunConfig
from .core import PointCloud, build_index, estimate_normals, voxel_downsample
from .eval import EvalReport, evaluate
from .features import FeatureMatrix, extract_features
from .patchcore import AnomalyResult, MemoryBank, build_memory, propagate_to_points, score

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    cloud: PointCloud              # the (downsampled) test cloud that was scored
    result: AnomalyResult          # one row per point of ``cloud``
    report: Optional[EvalReport]
    paths: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def prepare(cloud: PointCloud, cfg: RunConfig) -> PointCloud:
    return voxel_downsample(cloud, cfg.voxel_size) if cfg.voxel_size > 0 else cloud


def compute_features(cloud: PointCloud, cfg: RunConfig,
                     viewpoint: Optional[Sequence[float]] = None) -> FeatureMatrix:
    """Normals and descriptors of an already-prepared cloud.

    ``viewpoint`` is used for normal orientation when the config does not set one.
    """
    vp = cfg.normal_viewpoint if cfg.normal_viewpoint is not None else viewpoint
    index = build_index(cloud, cfg.k_max, cfg.workers)
    normals = estimate_normals(cloud, index, cfg.normal_radius, viewpoint=vp, k_max=cfg.k_max)
    feats = extract_features(cloud, normals, index, cfg.feature_mode, cfg.feature_radius,
                             cfg.intensity_radius, cfg.bins, cfg.intensity_weight,
                             cfg.relative_intensity, cfg.k_max, cfg.workers)
    index.clear_cache()
    return feats


def build_bank(features: FeatureMatrix, cfg: RunConfig, source_id: str = "") -> MemoryBank:
    return build_memory(features, cfg.bank_size, cfg.seed, cfg.coreset_start,
                        cfg.projection_dim, source_id)


def detect(cloud: PointCloud, features: FeatureMatrix, bank: MemoryBank) -> AnomalyResult:
    """Score the rows and spread the result over every point of ``cloud``."""
    result = score(features, bank)
    return propagate_to_points(result, features.point_ids, cloud.positions)


def write_outputs(cloud: PointCloud, result: AnomalyResult, cfg: RunConfig, outdir: str,
                  report: Optional[EvalReport] = None) -> dict:
    os.makedirs(outdir, exist_ok=True)
    paths = {"scores": os.path.join(outdir, "scores.csv"),
             "heatmap": os.path.join(outdir, "heatmap.ply")}
    mio.write_scores_csv(paths["scores"], cloud, result, cfg.thresholds)
    mio.write_heatmap(result, cloud, paths["heatmap"])
    if report is not None:
        paths.update(mio.write_report(report, outdir))
        if cfg.figures:
            from .plotting import write_figures
            paths.update(write_figures(report, cloud.positions, result.scores, outdir))
    return paths


def run_pipeline(reference: PointCloud, test: PointCloud, cfg: RunConfig, outdir: str,
                 viewpoint: Optional[Sequence[float]] = None, save_intermediates: bool = False) -> PipelineResult:
    """Reference scan in, scores/heatmap/report out.

    The report is produced when the test cloud carries labels.
    """
    timings = {}
    t0 = time.perf_counter()
    ref = prepare(reference, cfg)
    tst = prepare(test, cfg)
    timings["downsample"] = time.perf_counter() - t0
    log.info("downsampled to %d reference / %d test points", len(ref), len(tst))

    t0 = time.perf_counter()
    f_ref = compute_features(ref, cfg, viewpoint)
    f_tst = compute_features(tst, cfg, viewpoint)
    timings["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bank = build_bank(f_ref, cfg, ref.frame_id)
    timings["bank"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = detect(tst, f_tst, bank)
    timings["score"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = None
    if tst.labels is not None:
        report = evaluate(result, tst.labels, cfg.thresholds, cfg.kde_grid)
        report.config.update({"feature_mode": cfg.feature_mode, "bank_size": bank.m, "seed": cfg.seed})
    paths = write_outputs(tst, result, cfg, outdir, report)
    if save_intermediates:
        paths["features_reference"] = os.path.join(outdir, "features_reference.bin")
        paths["features_test"] = os.path.join(outdir, "features_test.bin")
        paths["bank"] = os.path.join(outdir, "bank.bin")
        mio.write_features(f_ref, paths["features_reference"])
        mio.write_features(f_tst, paths["features_test"])
        mio.write_bank(bank, paths["bank"])
    timings["report"] = time.perf_counter() - t0
    log.info("timings: %s", {k: round(v, 2) for k, v in timings.items()})
    return PipelineResult(tst, result, report, paths, timings)
