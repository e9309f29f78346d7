import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = str(marker.args[0])
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or label not in _RESULTS:
        if report.when == "call" or failed:
            _RESULTS[label] = "FAIL" if failed else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=lambda s: (int(s.rstrip("abc")), s)):
        terminalreporter.write_line(f"criterion {label}: {_RESULTS[label]}")
