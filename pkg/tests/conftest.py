import pytest

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance(capsys):
    """Record and print one status line for an acceptance criterion."""

    def record(name: str, ok, detail: str) -> None:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"{status:4s} {name}: {detail}"
        _ACCEPTANCE[name] = line
        with capsys.disabled():
            print(f"\n[acceptance] {line}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE.values():
            terminalreporter.write_line(line)
