"""Shared fixtures.

Every EM run made in this process is checked twice: the penalized objective
trace must be non-increasing up to a relative slack of 1e-8, and after each
baseline update the expected events must balance the observed ones to 1e-10.
A violation fails the test that triggered the run; session totals are kept
for the acceptance report, which is collected last.
"""

import numpy as np
import pytest

from flashjm import em, evaluation
from flashjm.simulate import SimConfig, simulate

SLACK = 1e-8
BALANCE_TOL = 1e-10
SESSION = {"runs": 0, "iterations": 0, "balance_checks": 0, "trace_violations": [],
           "balance_violations": []}
_current = []
ACCEPTANCE_LINES = []
_original_run_em = em.run_em


def trace_violations(trace, slack=SLACK):
    """Indices ``i`` where ``trace[i + 1]`` exceeds ``trace[i]`` beyond the relative slack."""
    t = np.asarray(trace, dtype=float)
    return [i for i in range(t.size - 1) if t[i + 1] > t[i] + slack * abs(t[i])]


def balance_violations(balance, tol=BALANCE_TOL):
    return [(i, e, m) for i, (e, m) in enumerate(balance) if abs(e - m) > tol * max(abs(e), 1.0)]


def _checked_run_em(*args, **kwargs):
    res = _original_run_em(*args, **kwargs)
    SESSION["runs"] += 1
    SESSION["iterations"] += len(res.trace) - 1
    SESSION["balance_checks"] += len(res.balance)
    bad = trace_violations(res.trace)
    if bad:
        SESSION["trace_violations"].append(list(res.trace))
        _current.append(("trace", bad, list(res.trace)))
    bad = balance_violations(res.balance)
    if bad:
        SESSION["balance_violations"].append(bad)
        _current.append(("balance", bad))
    return res


em.run_em = _checked_run_em
evaluation.run_em = _checked_run_em


def pytest_collection_modifyitems(session, config, items):
    # the acceptance report summarizes checks made by the rest of the suite
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _checked_runs():
    _current.clear()
    yield
    assert not _current, f"EM run failed a monotonicity or balance check: {_current[:1]}"


@pytest.fixture(scope="session")
def small_cohort():
    return simulate(SimConfig(n=120, high_risk_count=48, seed=3))


@pytest.fixture(scope="session")
def small_config():
    return em.FitConfig(K=2, max_iter=40, zeta1=0.01, zeta2=0.01,
                        catalog=em.FeatureCatalog(("mean", "last_value", "max")))


@pytest.fixture(scope="session")
def small_fit(small_cohort, small_config):
    return em.fit(small_cohort[0], small_config)
