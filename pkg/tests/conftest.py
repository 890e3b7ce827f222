import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from defham.phase_space import ParticleMeasure

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_measure(p, q, w0=None, S=None):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = p.shape[0]
    w0 = np.full(n, 1.0 / n) if w0 is None else np.asarray(w0, dtype=float)
    S = np.zeros(n) if S is None else np.asarray(S, dtype=float)
    return ParticleMeasure(p, q, w0, S, np.zeros(n, bool), np.full(n, np.nan))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion at the end of the session

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    num, title = mark
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(num, (title, "PASS"))[1]
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _CRITERIA[num] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}  {title}")
