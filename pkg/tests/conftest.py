"""Collects outcomes of ``@pytest.mark.criterion(n, text)`` tests and prints
one PASS/FAIL line per acceptance criterion at the end of the session."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    entry = _RESULTS.setdefault(number, {"text": text, "passed": 0, "failed": [], "skipped": 0})
    if report.when == "call" or report.outcome != "passed":
        if report.failed:
            entry["failed"].append(item.name)
        elif report.skipped:
            entry["skipped"] += 1
        elif report.when == "call":
            entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        ok = not e["failed"] and e["passed"] > 0
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {e['text']}"
        if e["failed"]:
            line += f"  (failed: {', '.join(e['failed'])})"
        elif e["passed"] == 0:
            line += "  (nothing ran)"
        terminalreporter.write_line(line)
