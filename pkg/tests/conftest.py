import pytest

_lines = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` prints and records one pass/fail line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(_lines, [])

    def record(n, title, ok, detail=""):
        line = f"acceptance {n}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_lines, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
