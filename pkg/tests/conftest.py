import numpy as np
import pytest

from sghn.lattice import Kind, LatticeSpec

ONE_D = [
    LatticeSpec(Kind.FK, 5),
    LatticeSpec(Kind.ROTATOR, 5),
    LatticeSpec(Kind.TODA, 5),
    LatticeSpec(Kind.FK_TODA, 5, mu=0.3),
    LatticeSpec(Kind.FPUT_TODA, 5, mu=0.7),
    LatticeSpec(Kind.KG_LRI, 6, a=1.0, b=0.5),
]
ALL_SPECS = ONE_D + [LatticeSpec(Kind.FK_2D, 4, m=3, a=1.0, b=0.8, rho=0.5)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def spec_id(spec):
    return f"{spec.kind.value}-{spec.dim}"


# acceptance results, printed once at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
