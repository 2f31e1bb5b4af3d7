"""Shared acceptance reporting: one pass/fail line per criterion in the summary."""

CRITERION_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str = "", soft: bool = False) -> None:
    status = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
    line = f"[{status}] {name}" + (f" — {detail}" if detail else "")
    CRITERION_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
