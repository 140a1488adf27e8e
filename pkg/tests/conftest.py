import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    The lines are printed immediately (visible with ``-s``) and repeated, in
    criterion order, in the terminal summary of every run.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number, line):
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
