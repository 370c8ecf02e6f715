import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from marketgrid.analysis import LyapunovMonitor  # noqa: E402
from marketgrid.costs import CostProfile  # noqa: E402
from marketgrid.dynamics import ClosedLoop, Gains, integrate  # noqa: E402
from marketgrid.network import Network  # noqa: E402
from marketgrid.scenario import load_scenario  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def two_bus(gamma=1.0, M=(1.0, 1.0), A=(1.0, 1.0), omega_base=1.0):
    return Network(2, ((0, 1),), np.array([gamma]), np.array(M), np.array(A), omega_base=omega_base)


def triangle(omega_base=1.0):
    return Network(3, ((0, 1), (1, 2), (0, 2)), np.array([1.0, 2.0, 1.5]),
                   np.array([1.0, 2.0, 1.5]), np.array([0.5, 0.7, 0.9]), omega_base=omega_base)


@pytest.fixture
def tri():
    return triangle()


@pytest.fixture(scope="session")
def ieee14():
    return load_scenario("ieee14-sigma300")


class SimRun:
    """A full simulation with a per-step Lyapunov monitor and running minima."""

    def __init__(self, scenario, dt=None):
        self.scenario = scenario
        model = ClosedLoop(scenario.network, scenario.costs, scenario.P_d, scenario.gains)
        self.monitor = LyapunovMonitor(scenario.gains)
        self.min_b = np.inf
        self.min_P = np.inf
        sl = model.sl

        def minima(t, x, seg, m):
            self.min_b = min(self.min_b, x[sl["b"]].min())
            self.min_P = min(self.min_P, x[sl["P_g"]].min())

        t0 = time.perf_counter()
        self.traj = integrate(model, scenario.initial_state().to_vector(), scenario.events,
                              scenario.t_end, dt or scenario.dt, scenario.stride,
                              observers=[self.monitor, minima])
        self.wall = time.perf_counter() - t0

    def segment_end(self, k):
        idx = np.flatnonzero(self.traj.segment_index == k)
        return self.traj.view(idx[-1])


@pytest.fixture(scope="session")
def run300():
    return SimRun(load_scenario("ieee14-sigma300"))


@pytest.fixture(scope="session")
def run0():
    return SimRun(load_scenario("ieee14-sigma0"))


def random_costs(rng, n):
    return CostProfile.quadratic(rng.uniform(0.5, 50.0, n), rng.uniform(0.0, 40.0, n))


def uniform_gains(n, sigma=300.0, **kw):
    return Gains.uniform(n, sigma=sigma, **kw)
