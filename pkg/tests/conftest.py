"""Shared pytest hooks: collects acceptance-criterion verdicts and prints
one pass/fail line per criterion in the terminal summary."""

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = ""):
    _CRITERIA[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        verdict = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} [{verdict}] {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
