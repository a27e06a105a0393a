import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def direct_series(coef_fn, K, d, x):
    """Independent oracle: sum over |k|_inf <= K of V_hat(k) cos(2 pi k.x)."""
    ax = np.arange(-K, K + 1)
    ks = np.stack([m.ravel() for m in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
    vals = coef_fn(ks)
    x = np.atleast_2d(x)
    return np.array([np.sum(vals * np.cos(2.0 * np.pi * ks @ p)) for p in x])


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``criterion(n, name, ok, detail)``.  A test that errors before
    recording is reported as FAIL with the exception type.
    """
    key = request.node.nodeid
    state = {}

    def record(number, name, ok, detail=""):
        state.update(number=number, name=name)
        _CRITERIA[key] = (number, f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        print(_CRITERIA[key][1])
        return ok

    yield record
    if key not in _CRITERIA:
        number = request.node.get_closest_marker("criterion")
        n = number.args[0] if number else "?"
        _CRITERIA[key] = (n, f"criterion {n} [FAIL] {request.node.name}: did not complete")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA.values(), key=lambda v: str(v[0])):
            terminalreporter.write_line(line)
