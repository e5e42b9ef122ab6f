import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": ""})
    if report.when == "call":
        entry["ran"] = True
    if report.when != "call" and not report.failed:
        return
    # every criterion test prints its measured values; the last line becomes the summary detail
    lines = report.capstdout.strip().splitlines()
    measured = lines[-1] if lines else ""
    if report.failed:
        entry["ok"] = False
        crash = getattr(report.longrepr, "reprcrash", None)
        message = crash.message.splitlines()[0] if crash is not None else ""
        entry["detail"] = "; ".join(t for t in (measured, message) if t)
    else:
        entry["detail"] = measured

def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = e["detail"].replace("\n", " ")
        terminalreporter.write_line(f"{status} criterion {number:2d}: {e['title']}  [{detail}]")
