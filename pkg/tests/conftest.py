"""Shared test plumbing: the acceptance scorecard.

Acceptance tests record one verdict line each; the terminal-summary hook
prints the full scorecard after capture ends so it always shows up in the
run log.
"""

VERDICTS = []


def record_verdict(number, name, ok):
    line = f"ACCEPTANCE {number} ({name}): {'PASS' if ok else 'FAIL'}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
