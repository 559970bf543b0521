import numpy as np
import pytest
from hypothesis import settings

from dtrweights import Clause, Panel, Regime

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_panel(rng, n=40, T=2, p=2):
    """Small panel with moderate propensities and both actions present."""
    X = tuple(rng.normal(0.0, 1.0, size=(n, p)) for _ in range(T))
    A = rng.integers(0, 2, size=(n, T))
    A[0] = 1
    A[1] = 0
    Y = rng.normal(10.0, 3.0, size=n)
    return Panel(X=X, A=A, Y=Y)


def random_regime(rng, T=2, p=2):
    stages = []
    for _ in range(T):
        k = int(rng.integers(1, p + 1))
        idx = rng.choice(p, size=k, replace=False)
        stages.append(tuple(Clause(int(j), float(rng.normal(0, 0.7)), rng.choice(["<=", ">="])) for j in idx))
    return Regime(tuple(stages))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        crit = dict(report.user_properties).get("criterion")
        if crit is not None:
            _CRITERIA[crit] = (report.outcome, dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[k]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {k:>2}: {status}  {detail}")


_CRITERIA: dict = {}
