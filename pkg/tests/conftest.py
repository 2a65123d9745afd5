import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wsobolev.weights import WCoordinate, WProduct

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

IDENTITY = WCoordinate()
ONE_ATOM = WCoordinate(atoms=((0.5, 1.0),))
TWO_ATOMS = WCoordinate(breakpoints=(0.0, 0.4), slopes=(1.0, 2.0), atoms=((0.25, 0.2), (0.75, 0.3)))
COORDS = {"identity": IDENTITY, "one_atom": ONE_ATOM, "two_atoms": TWO_ATOMS}


def product(coord, d):
    return WProduct((coord,) * d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
