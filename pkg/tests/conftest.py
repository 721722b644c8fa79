"""Shared fixtures and the per-criterion acceptance summary."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, title, limit): acceptance criterion n with a runtime limit in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n, title, limit = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "limit": limit, "failed": [], "skipped": [],
                                    "passed": 0, "seconds": 0.0})
    # fixture setup (model training) counts toward the criterion's runtime
    entry["seconds"] += rep.duration
    if rep.when == "setup" and not rep.failed and not rep.skipped:
        return
    if rep.passed:
        entry["passed"] += 1
    elif rep.skipped:
        entry["skipped"].append(item.name)
    else:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        slow = e["seconds"] > e["limit"]
        status = "FAIL" if e["failed"] or slow or not e["passed"] else "PASS"
        line = f"criterion {n:2d} {status}  {e['title']}  ({e['seconds']:.1f} s, limit {e['limit']} s)"
        if e["failed"]:
            line += "  failing: " + ", ".join(e["failed"])
        if slow:
            line += "  over the runtime limit"
        if e["skipped"]:
            line += "  skipped: " + ", ".join(e["skipped"])
        tr.write_line(line)
