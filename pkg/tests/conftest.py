import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(n, passed, detail) -> passed."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
