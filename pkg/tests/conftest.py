import re

import pytest

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run the slow d = 100 / C = 50 sweeps")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="slow; run with --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.search(r"\d+", k).group()), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:8s} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    """``record(criterion, passed, detail)`` stores a line for the summary and returns ``passed``."""

    def _record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)

    return _record
