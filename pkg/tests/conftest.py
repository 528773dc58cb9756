import re

import pytest

CRITERIA = range(1, 12)


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the summary prints a line per criterion."""
    store = request.config._acceptance

    def record(number: int, passed: bool, detail: str) -> None:
        store[number] = (bool(passed), detail)
        assert passed, f"criterion {number}: {detail}"

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = re.match(r"test_c(\d+)_", item.name)
    if match and report.failed:
        # a crash before the verdict still counts as a failed criterion
        item.config._acceptance.setdefault(int(match.group(1)), (False, f"error: {call.excinfo.typename}"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config._acceptance
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n not in store:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        passed, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
