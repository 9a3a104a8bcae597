import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_cloud
from multifpfhi.cli import EXIT_CODES, main
from multifpfhi.io import read_cloud, read_scores_csv, write_cloud

FAST = ["--voxel_size", "0.04", "--bank_size", "500", "--feature_radius", "0.5"]


def wavy(rng, n=900, bump=0.0):
    u, v = rng.uniform(0, 1, (2, n))
    z = 0.05 * np.sin(6 * u) * np.cos(4 * v) + bump * np.exp(-((u - 0.5) ** 2 + (v - 0.5) ** 2) / 0.01)
    return make_cloud(np.column_stack([u, v, z]), rng.uniform(0.4, 0.6, n), np.zeros(n, dtype=int))


@pytest.fixture
def pair_files(tmp_path, rng):
    ref, test = str(tmp_path / "ref.ply"), str(tmp_path / "test.ply")
    write_cloud(wavy(rng), ref)
    write_cloud(wavy(rng, bump=0.05), test)
    return ref, test


def test_unknown_subcommand_prints_usage(capsys):
    code = main(["frobnicate"])
    err = capsys.readouterr().err
    assert code == EXIT_CODES["usage"] != 0
    assert "error[usage]" in err and "usage:" in err


def test_missing_subcommand(capsys):
    assert main([]) == EXIT_CODES["usage"]
    assert "subcommand" in capsys.readouterr().err


def test_unknown_flag_names_the_flag(capsys):
    assert main(["pipeline", "--out", "x", "--bogus", "1"]) == EXIT_CODES["usage"]
    assert "--bogus" in capsys.readouterr().err


def test_invalid_config_value(tmp_path, capsys):
    code = main(["pipeline", "--preset", "water_only", "--out", str(tmp_path), "--bins", "0"])
    assert code == EXIT_CODES["config"]
    assert "error[config]" in capsys.readouterr().err


def test_missing_input_file(tmp_path, capsys):
    code = main(["features", "--cloud", str(tmp_path / "none.ply"), "--out", str(tmp_path / "f.bin")])
    assert code == EXIT_CODES["io"]
    assert "none.ply" in capsys.readouterr().err


def test_pipeline_water_only_smoke(tmp_path, capsys):
    out = str(tmp_path / "run")
    code = main(["pipeline", "--preset", "water_only", "--feature_mode", "multi", "--out", out] + FAST)
    assert code == 0, capsys.readouterr().err
    report = open(os.path.join(out, "report.txt")).read()
    assert "threshold 0.3:" in report and "f1=" in report and "threshold 0.5:" in report
    for name in ("scores.csv", "heatmap.ply", "metrics.csv", "label_stats.csv", "kde.png", "heatmap.png"):
        assert os.path.exists(os.path.join(out, name)), name
    assert open(os.path.join(out, "kde.png"), "rb").read(8) == b"\x89PNG\r\n\x1a\n"


def test_detect_with_mismatched_bank_layout(tmp_path, pair_files, capsys):
    ref, test = pair_files
    bank = str(tmp_path / "bank.bin")
    assert main(["bank", "--cloud", ref, "--out", bank, "--feature_mode", "fpfh", "--voxel_size", "0.01",
                 "--feature_radius", "0.15", "--normal_radius", "0.1"]) == 0
    code = main(["detect", "--bank", bank, "--cloud", test, "--out", str(tmp_path / "d"),
                 "--feature_mode", "multi", "--voxel_size", "0.01", "--feature_radius", "0.15",
                 "--normal_radius", "0.1"])
    assert code == EXIT_CODES["layout_mismatch"]
    assert "error[layout_mismatch]" in capsys.readouterr().err


def test_staged_commands_match_pipeline(tmp_path, pair_files):
    ref, test = pair_files
    flags = ["--voxel_size", "0.01", "--feature_radius", "0.15", "--normal_radius", "0.1",
             "--bank_size", "200", "--figures", "false"]
    feats, bank = str(tmp_path / "f.bin"), str(tmp_path / "b.bin")
    assert main(["features", "--cloud", ref, "--out", feats] + flags) == 0
    assert main(["bank", "--features", feats, "--out", bank] + flags) == 0
    assert main(["detect", "--bank", bank, "--cloud", test, "--out", str(tmp_path / "d")] + flags) == 0
    assert main(["eval", "--scores", str(tmp_path / "d" / "scores.csv"), "--out", str(tmp_path / "e")] + flags) == 0
    assert os.path.exists(tmp_path / "e" / "report.txt")
    res, labels = read_scores_csv(str(tmp_path / "d" / "scores.csv"))
    assert res.scores.max() == 1.0 and labels is not None


def test_synth_writes_pair(tmp_path):
    out = str(tmp_path / "s")
    assert main(["synth", "--preset", "water_only", "--out", out]) == 0
    test = read_cloud(os.path.join(out, "test.ply"))
    assert (test.labels == 4).any()
    assert os.path.exists(os.path.join(out, "scene.yaml"))
    # the written scene description regenerates the same pair
    out2 = str(tmp_path / "s2")
    assert main(["synth", "--scene", os.path.join(out, "scene.yaml"), "--out", out2]) == 0
    assert open(os.path.join(out, "test.ply"), "rb").read() == open(os.path.join(out2, "test.ply"), "rb").read()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "multifpfhi", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pipeline" in proc.stdout


def test_intensity_property_flag(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nproperty float refl\nend_header\n"
            "0 0 0 1\n0.01 0 0 2\n0 0.01 0 3\n0.01 0.01 0 4\n")
    (tmp_path / "c.ply").write_text(text)
    args = ["features", "--cloud", str(tmp_path / "c.ply"), "--out", str(tmp_path / "f.bin"),
            "--intensity-property", "refl", "--voxel_size", "0.001", "--normal_radius", "0.05",
            "--feature_radius", "0.05"]
    assert main(args) == 0
