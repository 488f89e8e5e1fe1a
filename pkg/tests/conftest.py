import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance verdict line; returns the verdict for asserting."""
    def report(tag, passed, detail):
        line = f"criterion {tag}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
