import pytest

from fene2d.coupled_solver import Discretization
from fene2d.params import REFERENCE

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, ok: bool, detail: str) -> None:
    """Record one acceptance line, then fail the calling test if needed."""
    line = f"criterion {criterion:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_disc():
    """Tiny discretization for unit tests of the coupled machinery."""
    return Discretization.build(REFERENCE, n1=10, n2=8, n_modes=12, n_r=10, n_theta=16)


@pytest.fixture(scope="session")
def ref_disc():
    return Discretization.build(REFERENCE, n1=16, n2=16, n_modes=20, n_r=24, n_theta=48)
