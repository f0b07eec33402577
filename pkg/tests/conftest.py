"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(label, passed: bool, detail: str) -> str:
    label = str(label)
    line = f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[label] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
