import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import DURATIONS, RESULTS  # noqa: E402


def pytest_collection_modifyitems(items):
    # acceptance last, so its timing criterion sees every other test
    items.sort(key=lambda item: item.module.__name__ == "test_acceptance")


def pytest_runtest_logreport(report):
    DURATIONS[report.nodeid] = DURATIONS.get(report.nodeid, 0.0) + report.duration


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        title, passed, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title} {detail}".rstrip())
