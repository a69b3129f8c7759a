ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    """Queue a one-line verdict for the terminal summary and return ``passed``."""
    tag = "PASS" if passed else "FAIL"
    line = f"[{tag}] criterion {number}: {title}"
    ACCEPTANCE_LINES.append(line + (f" | {detail}" if detail else ""))
    print(ACCEPTANCE_LINES[-1])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
