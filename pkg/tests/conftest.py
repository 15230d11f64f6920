import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "acceptance: acceptance-criteria suite")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = next((v for k, v in item.user_properties if k == "detail"), "")
        _CRITERIA.append((marker.args[0], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a short measurement to the acceptance summary line."""
    def put(text):
        record_property("detail", text)
    return put
