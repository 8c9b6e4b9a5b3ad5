import numpy as np
import pytest

from fluorocal.data import SyntheticScenario, simulate_captures
from fluorocal.self_calibration import initial_parameters

# filled by test_acceptance, shown after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def small_scenario(**kw):
    base = dict(n_targets=120, frames_total=24, frames_train=8, seed=7)
    base.update(kw)
    return SyntheticScenario(**base)


@pytest.fixture(scope="session")
def small_sim():
    scn = small_scenario()
    sim = simulate_captures(scn)
    init = initial_parameters(sim.train, sim.init_poses, scn.nominal_iop, sim.phantom)
    return scn, sim, init


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
