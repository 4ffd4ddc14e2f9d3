import math

import numpy as np
import pytest

from neumannlab.geometry import Annulus, Disk, DriftSpec, HalfLine, Interval, ManifoldModel, Rectangle
from neumannlab.sde import SimParams


@pytest.fixture
def disk():
    return ManifoldModel(Disk(1.0))


@pytest.fixture
def annulus():
    return ManifoldModel(Annulus(0.5, 1.5))


@pytest.fixture
def halfline():
    return ManifoldModel(HalfLine())


@pytest.fixture
def interval_pi():
    return ManifoldModel(Interval(0.0, math.pi))


@pytest.fixture
def quick():
    """Small batch for smoke-level Monte Carlo checks."""
    return SimParams(dt=1e-3, n_paths=2000, base_seed=2024)


MODELS = {
    "disk": ManifoldModel(Disk(1.0)),
    "disk+lin": ManifoldModel(Disk(1.0), DriftSpec.linear(1.0)),
    "annulus": ManifoldModel(Annulus(0.5, 1.5)),
    "annulus+lin": ManifoldModel(Annulus(0.5, 1.5), DriftSpec.linear(-1.0)),
    "halfline": ManifoldModel(HalfLine()),
    "halfline+ou": ManifoldModel(HalfLine(), DriftSpec.linear(-1.0)),
    "interval": ManifoldModel(Interval(0.0, math.pi)),
    "rectangle": ManifoldModel(Rectangle(1.0, 2.0)),
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
