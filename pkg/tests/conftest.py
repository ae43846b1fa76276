"""Shared fixtures plus the acceptance-criteria summary.

Every test in test_acceptance.py carries a `criterion(ident, title)` marker;
after the run a one-line PASS/FAIL verdict per criterion is printed so the
acceptance gate can be read off directly.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
if str(TESTS_DIR) not in sys.path:
    sys.path.insert(0, str(TESTS_DIR))

DEMO_DIR = TESTS_DIR / "fixtures" / "demo"


@pytest.fixture(scope="session")
def demo_dir() -> Path:
    assert DEMO_DIR.is_dir(), "run tests/make_demo_fixture.py first"
    return DEMO_DIR


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    # keep ambient credentials/services from leaking into tests
    monkeypatch.delenv("DESIGNCODER_API_KEY", raising=False)
    monkeypatch.delenv("DESIGNCODER_EMBED_URL", raising=False)


_criteria: dict[str, str] = {}
_results: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(ident, title): tags a test as one acceptance criterion"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    ident, title = marker.args
    _criteria.setdefault(ident, title)
    if report.when == "call":
        _results[ident] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.outcome != "passed":
        _results[ident] = "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for ident in sorted(_criteria):
        status = _results.get(ident, "NOT RUN")
        terminalreporter.write_line(f"{status:7s} {ident}: {_criteria[ident]}")
