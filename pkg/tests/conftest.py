import pytest

_CRITERIA = {}
_TABLES = []


class CriterionReport:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _CRITERIA[number] = line
        print(line)

    def table(self, text: str) -> None:
        _TABLES.append(text)
        print(text)


@pytest.fixture(scope="session")
def criterion():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA and not _TABLES:
        return
    terminalreporter.section("acceptance criteria")
    for text in _TABLES:
        terminalreporter.write_line(text)
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
