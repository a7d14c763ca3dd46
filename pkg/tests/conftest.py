import pytest

_acceptance = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record (and print) the PASS/FAIL line of one acceptance criterion."""
    lines = request.config.stash.setdefault(_acceptance, [])

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_acceptance, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
