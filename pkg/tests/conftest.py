"""Shared pytest hooks.

Tests marked ``acceptance(n, "title")`` are grouped by criterion number; at
the end of the session one line per criterion reports PASS only if every
test of that criterion passed. Tests may attach measured values with
``record_property("measured", text)`` and they are echoed on that line.
"""

from __future__ import annotations

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "seen": False, "notes": []})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["seen"] = True
        if not report.passed:
            entry["passed"] = False
        if report.when == "call":
            entry["notes"].extend(str(v) for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["passed"] and entry["seen"] else "FAIL"
        line = f"criterion {number} {status}: {entry['title']}"
        if entry["notes"]:
            line += " | " + "; ".join(entry["notes"])
        terminalreporter.write_line(line)
