import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Registry of acceptance verdicts: ``criteria[n] = (passed, detail)``."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
