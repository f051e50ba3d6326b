import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# acceptance criterion -> (passed, detail), filled in by test_acceptance.py
CRITERIA = {}


def record(n, ok, detail):
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
