import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture()
def criterion():
    """Record one acceptance result: ``criterion(n, passed, detail)``."""

    def record(n: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
