import pytest

# criterion number -> (title, outcome), filled in as acceptance tests finish
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    # a setup failure (e.g. the experiment fixture) counts as a failed criterion too
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, result = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {result}  {title}")
