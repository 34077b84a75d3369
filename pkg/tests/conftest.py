"""Per-criterion summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, title)`` are grouped by ``n``; a
criterion passes when every test in its group passes. Details recorded via the
``criterion_note`` fixture are printed next to the verdict.
"""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def _entry(item):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return None
    n, title = marker.args
    return _results.setdefault(n, {"title": title, "outcomes": [], "notes": []})


@pytest.fixture
def criterion_note(request):
    entry = _entry(request.node)

    def note(text: str) -> None:
        if entry is not None:
            entry["notes"].append(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    entry = _entry(item)
    if entry is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["outcomes"].append("skipped" if report.skipped else report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        outcomes = entry["outcomes"]
        if not outcomes or all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS" if all(o in ("passed", "skipped") for o in outcomes) else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n}: {verdict}  {entry['title']}" + (f"  ({notes})" if notes else ""))
