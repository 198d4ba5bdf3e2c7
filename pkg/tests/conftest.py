import pytest

_criteria: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.fixture
def detail(request):
    """Free-form measurements shown next to the criterion's verdict."""
    request.node.detail = {}
    return request.node.detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    verdict = "PASS" if rep.passed else "FAIL"
    info = ", ".join(f"{k}={v}" for k, v in getattr(item, "detail", {}).items())
    _criteria[number] = f"criterion {number:2d} {verdict}  {title}" + (f"  ({info})" if info else "")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(_criteria[number])
