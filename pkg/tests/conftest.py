"""Shared pytest hooks.

The acceptance tests record one verdict line per criterion; replaying them in
the terminal summary keeps the lines visible even when output capture is on.
"""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
