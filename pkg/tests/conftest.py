CRITERIA: list[str] = []


def report(line: str) -> None:
    """Queue one acceptance line for the end-of-run summary and echo it."""
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
