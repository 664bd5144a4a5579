import pytest

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = getattr(item, "acceptance_detail", "")
    status = "PASS" if rep.passed else "FAIL"
    if not rep.passed and rep.when != "call":
        detail = f"error during {rep.when}"
    line = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")
    _ACCEPTANCE[number] = line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
