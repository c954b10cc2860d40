import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(pytestconfig):
    """Record one acceptance verdict line, then assert it."""
    lines = pytestconfig.stash.setdefault(_VERDICTS, [])

    def emit(n: int, ok: bool, detail: str):
        lines.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
