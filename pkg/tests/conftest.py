import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(line)
