import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


class CriterionRecorder:
    def __init__(self, number: int):
        self.number = number

    def check(self, ok: bool, detail: str) -> None:
        _CRITERIA[self.number] = (bool(ok), detail)
        assert ok, f"criterion {self.number}: {detail}"


@pytest.fixture
def criterion(request):
    n = request.node.get_closest_marker("criterion").args[0]
    _CRITERIA.setdefault(n, (False, "did not complete"))
    return CriterionRecorder(n)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
