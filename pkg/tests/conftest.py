import pytest

_results = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "criterion"):
            _results[report.criterion] = (report.outcome, report.detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = tuple(mark.args)
        rep.detail = getattr(item, "detail", "")


@pytest.fixture
def detail(request):
    """Record a one-line measurement shown next to the criterion verdict."""
    def note(text):
        request.node.detail = text
    return note


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (outcome, text) in sorted(_results.items()):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d} {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
