from acceptance_log import LINES


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for num in sorted(LINES):
            terminalreporter.write_line(LINES[num])
