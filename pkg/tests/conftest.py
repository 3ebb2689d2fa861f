"""Per-criterion summary for the acceptance suite.

Tests in ``test_acceptance.py`` are named ``test_a<N>_...``; each attaches
its measured values with ``record_property("detail", ...)``.  After the run
one line per criterion is printed, e.g. ``A3 PASS  worst mean 1.9 SE ...``.
"""

import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_a(\d+)_", report.nodeid)
    if not m:
        return
    key = f"A{m.group(1)}"
    entry = _RESULTS.setdefault(key, {"ok": True, "ran": False, "details": []})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = entry["ran"] or report.when == "call" or report.skipped
        if report.failed:
            entry["ok"] = False
        if report.skipped:
            entry["skipped"] = True
    for name, value in report.user_properties:
        if name == "detail" and report.when == "call":
            entry["details"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k[1:])):
        e = _RESULTS[key]
        status = "SKIP" if e.get("skipped") and e["ok"] else ("PASS" if e["ok"] else "FAIL")
        tr.write_line(f"{key} {status}  " + "; ".join(e["details"]))
