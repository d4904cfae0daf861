import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            number, title = mark.args
            _RESULTS[number] = {"title": title, "nodeid": item.nodeid, "outcome": "not run", "notes": []}


def pytest_runtest_logreport(report):
    for row in _RESULTS.values():
        if row["nodeid"] != report.nodeid:
            continue
        if report.failed:
            row["outcome"] = "FAIL"
        elif report.when == "call" and row["outcome"] != "FAIL":
            row["outcome"] = "SKIP" if report.skipped else "PASS"
        elif report.skipped:
            row["outcome"] = "SKIP"
        row["notes"] += [f"{k}={v}" for k, v in report.user_properties if report.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        row = _RESULTS[number]
        notes = f"  [{', '.join(row['notes'])}]" if row["notes"] else ""
        terminalreporter.write_line(f"criterion {number}: {row['outcome']:<4} {row['title']}{notes}")
