import pytest

# criterion number -> (passed, detail); filled by test_acceptance
VERDICTS = {}


def record_verdict(number, passed, detail):
    VERDICTS[number] = (passed, detail)
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict():
    def check(number, passed, detail):
        record_verdict(number, passed, detail)
        assert passed, f"criterion {number}: {detail}"
    return check
