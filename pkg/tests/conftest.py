"""Shared fixtures plus a per-criterion summary for the acceptance suite."""
import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): marks a test as covering one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed
        prev_ok, _ = _CRITERIA.get(num, (True, title))
        _CRITERIA[num] = (prev_ok and ok, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_CRITERIA):
        ok, title = _CRITERIA[num]
        terminalreporter.write_line(
            f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
