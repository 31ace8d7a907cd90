import acceptance_support


def pytest_terminal_summary(terminalreporter):
    if acceptance_support.RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(acceptance_support.RESULTS):
            terminalreporter.write_line(line)
