import time

import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0,
                                          "detail": []})
    entry["ok"] &= rep.passed
    entry["seconds"] += rep.duration
    if rep.failed:
        msg = str(rep.longrepr).strip().splitlines()
        entry["detail"].append(msg[-1] if msg else "failed")
    for name, value in item.user_properties:
        if name == "summary":
            entry["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {number}: {status} ({e['seconds']:.1f} s) {e['title']}"
        if e["detail"]:
            line += " | " + "; ".join(e["detail"])
        tr.write_line(line)


@pytest.fixture
def stopwatch():
    t0 = time.monotonic()
    return lambda: time.monotonic() - t0
