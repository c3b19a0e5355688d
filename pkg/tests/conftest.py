import pytest

CRITERIA = []


def record(number, title, ok, detail):
    """Remember one acceptance line; printed in the terminal summary."""
    CRITERIA.append((number, title, bool(ok), detail))
    print(f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
