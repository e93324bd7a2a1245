import pytest

_acceptance_lines = []


@pytest.fixture
def report():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def emit(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
        _acceptance_lines.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
