import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aggrollout.pomdp import DenseModel
from aggrollout.recovery import RecoveryParams, build_recovery_pomdp

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_dense(rng, n=3, U=2, Z=2, discount=0.9, sparse=False, g_max=2.0):
    """Random dense POMDP with costs in ``[0, g_max]``; ``sparse`` zeroes some entries while keeping rows stochastic."""
    T = rng.random((U, n, n))
    O = rng.random((U, n, Z))
    if sparse:
        T *= rng.random((U, n, n)) < 0.6
        T[..., 0] += 1e-3
        O *= rng.random((U, n, Z)) < 0.7
        O[..., 0] += 1e-3
    T /= T.sum(axis=2, keepdims=True)
    O /= O.sum(axis=2, keepdims=True)
    G = rng.uniform(0.0, g_max, (U, n, n))
    return DenseModel(T, O, G, discount)


@pytest.fixture(scope="session")
def k1():
    return build_recovery_pomdp(RecoveryParams(K=1))


@pytest.fixture(scope="session")
def k2():
    return build_recovery_pomdp(RecoveryParams(K=2))


@pytest.fixture
def make_dense():
    return random_dense


# --- acceptance summary ----------------------------------------------------------
# Tests marked ``criterion(n)`` report one line each at the end of the session.

_criteria: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria.setdefault(mark.args[0], []).append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _criteria[n]
        ok = all(o == "passed" for _, o, _ in results)
        detail = " | ".join(d for _, _, d in results if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
