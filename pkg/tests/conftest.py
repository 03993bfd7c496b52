import pytest

ACCEPTANCE = {}
CRITERIA = 9
_collected = []


def pytest_collection_modifyitems(items):
    _collected.append(any(item.fspath.basename == "test_acceptance.py" for item in items))


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not (ACCEPTANCE or any(_collected)):
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, CRITERIA + 1):
        # a criterion whose test errored before recording counts as failed
        title, passed, detail = ACCEPTANCE.get(number, ("not recorded", False, ""))
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {number}. {title}" + (f" ({detail})" if detail else ""))
