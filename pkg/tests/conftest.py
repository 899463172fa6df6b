import re

import pytest

_CRITERIA = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_ac(\d+)_(\w+)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed or report.skipped:
        detail = dict(report.user_properties).get("detail", "")
        key = int(m.group(1))
        # a failed teardown must not overwrite a failed call
        if key in _CRITERIA and _CRITERIA[key][0] == "FAIL":
            return
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[key] = (outcome, m.group(2).replace("_", " "), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        outcome, name, detail = _CRITERIA[key]
        line = f"AC{key} {outcome}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


@pytest.fixture
def detail(record_property):
    """Call with a string to attach measured values to the acceptance summary line."""
    def record(text):
        record_property("detail", text)
    return record
