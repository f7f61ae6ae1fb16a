import pytest
from hypothesis import settings

settings.register_profile("matevit", deadline=None)
settings.load_profile("matevit")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by the test")


@pytest.fixture
def detail(request):
    """Append a short measurement to the criterion's summary line."""
    notes = []
    request.node.criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n, text = mark.args
    notes = getattr(item, "criterion_notes", [])
    _CRITERIA[n] = ("PASS" if report.passed else "FAIL", text, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text, notes = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {text}" + (f"  [{notes}]" if notes else ""))
