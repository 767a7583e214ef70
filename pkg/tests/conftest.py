import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_EXTRA: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str, extra: str = "") -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        if extra:
            _EXTRA.append(extra)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for block in _EXTRA:
        terminalreporter.write_line("")
        terminalreporter.write(block if block.endswith("\n") else block + "\n")
