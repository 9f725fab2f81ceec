"""Collects acceptance results and prints one PASS/FAIL line per criterion."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
TITLES = {
    1: "level tables exact",
    2: "exhaustive shift-PE products",
    3: "shift engine == multiply engine",
    4: "4-bit packing round trip",
    5: "LWGT/GACT sweep trend",
    6: "weight-copy and DMA-preload deltas",
    7: "energy arithmetic",
    8: "4->8 GEMM unit speedup",
}
_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _CRITERION.search(report.nodeid.split("::")[-1])
    if not m:
        return
    num = int(m.group(1))
    entry = _results.setdefault(num, {"title": TITLES.get(num, ""), "ok": True, "ran": 0})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        e = _results[num]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {num}: {e['title']} ({e['ran']} checks)")
