import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion number -> {"title", "ok", "ran"}
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): test belongs to an acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": 0})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    entry = _CRITERIA[mark.args[0]]
    if report.failed or (report.when == "setup" and report.skipped):
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        c = _CRITERIA[number]
        status = "FAIL" if not c["ok"] else "PASS" if c["ran"] else "NOT RUN"
        terminalreporter.write_line(f"{status:<7}  #{number:<2} {c['title']}")
