"""Collect the per-criterion verdict lines from the acceptance suite."""

_LINES = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _LINES.extend(value for key, value in report.user_properties if key == "criterion")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
