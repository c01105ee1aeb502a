import numpy as np
import pytest

from lagchaos.spectral import grid_points, mode_ball, project_physical


def field_from_function(d, fn, n_max=1, n_grid=8):
    """Velocity field whose values on a uniform grid are fn(points) (a trigonometric polynomial)."""
    y = grid_points(d, n_grid)
    vals = np.moveaxis(np.asarray(fn(y)), -1, 0)
    return project_physical(vals, d, mode_ball(d, n_max), scalar=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES: list[str] = []


def report(number: int, passed: bool, detail: str, label: str | None = None) -> bool:
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    status = label or ("PASS" if passed else "FAIL")
    line = f"criterion {number:2d}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
