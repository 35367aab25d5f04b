"""Collects acceptance verdicts and prints them at the end of the run."""

VERDICTS: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])
