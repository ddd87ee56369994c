"""Shared plumbing: the acceptance suite records one result per criterion
and this hook prints them as a block at the end of the run."""

ACCEPTANCE_RESULTS = {}


def record_criterion(number, description, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (description, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        description, passed, detail = ACCEPTANCE_RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {verdict} — {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
