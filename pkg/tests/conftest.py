"""Shared pytest plumbing.

The acceptance tests append their one-line verdicts here so they appear in
the terminal summary even when pytest captures per-test stdout.
"""

criterion_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in criterion_lines:
            terminalreporter.write_line(line)
