"""Shared test fixtures, sys.path setup, and the acceptance summary hook."""

import re
import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).resolve().parent
if str(TESTS_DIR) not in sys.path:
    sys.path.insert(0, str(TESTS_DIR))

import acceptance_registry  # noqa: E402  (needs the sys.path line above)

_CRITERION_RE = re.compile(r"test_c(\d+)_(\w+)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in item.nodeid:
        return
    match = _CRITERION_RE.match(item.name)
    if not match:
        return
    number = int(match.group(1))
    label = match.group(2).replace("_", " ")
    acceptance_registry.ACCEPTANCE_OUTCOMES[number] = (
        label,
        "PASS" if report.passed else "FAIL",
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = acceptance_registry.ACCEPTANCE_OUTCOMES
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        label, outcome = outcomes[number]
        detail = acceptance_registry.ACCEPTANCE_DETAILS.get(number, "")
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {number:2d} {outcome}  {label}{suffix}")
