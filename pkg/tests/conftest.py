import re

import pytest

# criterion label ("1", "4a", ...) -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(label, passed, detail):
        ACCEPTANCE[label] = (bool(passed), detail)
        print(f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=_natural):
        passed, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}")


def _natural(label):
    number, rest = re.match(r"(\d+)(.*)", label).groups()
    return int(number), rest
