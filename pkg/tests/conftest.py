import pytest

_VERDICTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance verdict; the lines are printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _VERDICTS.append((number, title, bool(passed), detail))
        print(f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}  {detail}".rstrip())
