import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def record_criterion():
    """Register one pass/fail line for the acceptance summary."""
    def record(number: int, name: str, ok: bool | None, detail: str) -> bool | None:
        status = "NOTE" if ok is None else "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"{status}  criterion {number}: {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
