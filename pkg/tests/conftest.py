import numpy as np
import pytest

from corridor_mpc.arm import ArmParams, DiscreteDynamics, UncertaintySet
from corridor_mpc.bounds import AccelSet, StateBox, estimate_constants
from corridor_mpc.synthesis import SynthesisConfig, candidates, select_candidate


class Offline:
    """Scale-1 offline products shared across test modules."""

    def __init__(self, scale=1.0):
        self.arm = ArmParams.planar(2)
        self.X = StateBox.default(2)
        self.dyn = DiscreteDynamics.double_integrator(2)
        self.unc = UncertaintySet.masses_and_damping(2, 0.05, scale)
        self.accel = AccelSet(np.full(2, 16.0))
        self.consts = estimate_constants(self.arm, self.unc, self.X, seed=0)
        self.cfg = SynthesisConfig.build(self.X, self.accel, self.dyn, self.consts)
        self.pool = candidates(self.cfg, self.dyn, self.consts)
        self.flex = select_candidate(self.cfg, self.dyn, self.consts, "flexible", self.pool)
        self.rigid = select_candidate(self.cfg, self.dyn, self.consts, "rigid", self.pool)


@pytest.fixture(scope="session")
def offline():
    return Offline(1.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
