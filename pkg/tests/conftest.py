import pytest

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(ac, passed, detail=""):
        ACCEPTANCE[ac] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        passed, detail = ACCEPTANCE[ac]
        terminalreporter.write_line(f"{ac}: {'PASS' if passed else 'FAIL'}  {detail}")
