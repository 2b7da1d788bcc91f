import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from roams_kit.dcrw import DcrwModel  # noqa: E402
from roams_kit.simlab import TRUE_THETA, ContaminationSpec, SimConfig, simulate  # noqa: E402
from roams_kit.ssm import ModelSpec  # noqa: E402


def spec_from(mats) -> ModelSpec:
    return ModelSpec(**{k: np.array(v, dtype=float) for k, v in mats.items()})


def local_level(obs_var=0.5, state_var=0.5, phi=1.0, mu0=0.0, var0=0.0) -> ModelSpec:
    return ModelSpec(np.array([[1.0]]), np.array([[phi]]), np.array([[obs_var]]),
                     np.array([[state_var]]), np.array([mu0]), np.array([[var0]]))


def sim(n=200, seed=0, config="fixed_distance", rate=0.1, **kw):
    spec = ContaminationSpec(config, rate, **kw)
    return simulate(SimConfig(n=n, seed=seed, dgp_theta=TRUE_THETA, contamination=spec))


@pytest.fixture
def dcrw():
    return DcrwModel()


@pytest.fixture(scope="session")
def contaminated():
    """n=200 DCRW track with 10% fixed-distance outliers."""
    return sim(200, seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("ab:"))):
            terminalreporter.write_line(line)
