import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from multifpfhi.core import PointCloud  # noqa: E402


def grid_plane(n=20, spacing=0.05, z=0.0):
    xs = np.arange(n) * spacing
    x, y = np.meshgrid(xs, xs, indexing="ij")
    pos = np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])
    return pos


def make_cloud(positions, intensities=None, labels=None):
    positions = np.asarray(positions, dtype=np.float64)
    if intensities is None:
        intensities = np.linspace(0.0, 1.0, positions.shape[0])
    return PointCloud.from_raw(positions, intensities, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the assertion itself stays in the test."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
