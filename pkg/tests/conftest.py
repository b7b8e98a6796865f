"""Shared test plumbing: the acceptance-criterion scoreboard.

Each acceptance test registers one pass/fail line; the lines are
printed inline (visible with ``-s`` or on failure) and echoed in a
terminal-summary section at the end of every run, so a plain
``pytest -v`` always shows the full scoreboard.
"""

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {number:2d} [{status}] {name}"
    if detail:
        line += f" — {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.line(ACCEPTANCE_LINES[number])
