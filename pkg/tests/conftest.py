"""Collects acceptance-criterion outcomes and prints one line per criterion after the run."""

import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.skipped or report.failed):
        return
    number, title = marker.args
    status = "SKIP" if report.skipped else "PASS" if report.passed else "FAIL"
    measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.skipped and isinstance(report.longrepr, tuple):
        measured = report.longrepr[2]
    _CRITERIA[number] = (title, status, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, measured = _CRITERIA[number]
        line = f"criterion {number:2d}: {status}  {title}"
        terminalreporter.write_line(f"{line}  ({measured})" if measured else line)
