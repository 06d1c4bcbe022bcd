"""Collects one PASS/FAIL line per test marked ``@pytest.mark.criterion``."""

import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion, reported as PASS/FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    line = f"{status}  [{number:>2}] {title}" + (f"  ({detail})" if detail else "")
    _LINES.append(line)
    report.sections.append(("acceptance", line))


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _LINES:
        terminalreporter.write_line(line)
