import numpy as np
import pytest

from film.features import PyramidConfig
from film.model import FilmModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 3-level model with base width 4 (divisor 4)."""
    return FilmModel(PyramidConfig(levels=3, base_width=4), seed=0)


# acceptance reporting -----------------------------------------------------------

ACCEPTANCE_CRITERIA = 10
_criteria: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion and echo a PASS/FAIL line."""
    def record(number: int, checks: dict[str, bool], detail: str = "") -> bool:
        ok = all(checks.values())
        failed = [name for name, passed in checks.items() if not passed]
        text = detail if ok else f"failed: {', '.join(failed)}; {detail}"
        _criteria[number] = (ok, text)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    ran_acceptance = any("test_acceptance" in r.nodeid
                         for reports in terminalreporter.stats.values()
                         for r in reports if hasattr(r, "nodeid"))
    if not ran_acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        ok, text = _criteria.get(n, (False, "not run or errored"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
