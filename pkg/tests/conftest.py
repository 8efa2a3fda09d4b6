import pytest

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.passed:
        status = "PASS"
    elif hasattr(rep, "wasxfail"):
        status = "FAIL (expected)"
    else:
        status = "FAIL"
    _VERDICTS[mark.args[0]] = f"criterion {mark.args[0]:>2}: {status:<15} {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
