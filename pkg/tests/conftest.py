import pytest

from regloss.data import make_datum
from regloss.fields import Cube
from regloss.plan import plan_cubes

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def bump():
    return make_datum({"name": "gaussian", "center": [0.5, 0.5], "width": 0.3}, 2)


@pytest.fixture(scope="session")
def cheap_plan(bump):
    """Two slots on the flank of a bump, one-step blocks at coarse quadrature."""
    return plan_cubes(bump, 2, (0.3, 0.5), 0.2, 0.05, bbox=Cube.unit(2), n_steps=1, block_quad=32)


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        line = f"criterion {number:2d}  {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
