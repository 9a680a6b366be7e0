"""Collects acceptance results and prints one line per criterion at the end of the run."""
from __future__ import annotations

import collections

RESULTS: dict[int, list[tuple[str, bool, str]]] = collections.defaultdict(list)
TITLES = {
    1: "gradient suite",
    2: "Woodham oracle",
    3: "GBR identity",
    4: "relaxation invariants",
    5: "bi-level correctness",
    6: "metric checks",
    7: "end-to-end desk scale",
    8: "ablation shape (96 vs 8 images)",
    9: "determinism",
}


def record(criterion: int, part: str, ok: bool, detail: str = "") -> bool:
    RESULTS[criterion].append((part, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(TITLES):
        parts = RESULTS.get(n)
        if not parts:
            tr.write_line(f"criterion {n} ({TITLES[n]}): NOT RUN")
            continue
        ok = all(p[1] for p in parts)
        tr.write_line(f"criterion {n} ({TITLES[n]}): {'PASS' if ok else 'FAIL'}")
        for part, good, detail in parts:
            tr.write_line(f"    [{'ok' if good else 'FAIL'}] {part}: {detail}")
