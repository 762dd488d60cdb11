import sys
from pathlib import Path

import pytest

from clusterbench.netdata import Network


@pytest.fixture
def two_triangles():
    """Two triangles joined by the bridge 2-3."""
    return Network.from_edges([("0", "1"), ("1", "2"), ("0", "2"), ("3", "4"), ("4", "5"), ("3", "5"), ("2", "3")])


STUBS = Path(__file__).parent / "stubs"


def stub(name, *args):
    """argv running one of the stub programs in tests/stubs."""
    return [sys.executable, str(STUBS / f"{name}.py"), *map(str, args)]


END_EVENTS = {"done", "failed", "timedout", "killed", "postpone", "restart"}


def replay_events(log_path):
    """Replay a pool event log.

    Returns ``(peak, conflicts)``: the highest number of simultaneously
    running jobs per category, and how often a job started on a CPU that a
    running job already held.
    """
    running = {}
    peak = {}
    conflicts = 0
    for line in Path(log_path).read_text().splitlines():
        parts = line.split(" ", 4)
        if len(parts) < 4:
            continue
        name, event = parts[2], parts[3]
        detail = parts[4] if len(parts) > 4 else ""
        if event == "start":
            fields = dict(kv.split("=", 1) for kv in detail.split())
            cpus = set(fields["cpus"].split(","))
            if any(cpus & held for _, held in running.values()):
                conflicts += 1
            running[name] = (fields["category"], cpus)
            cat = fields["category"]
            now = sum(1 for c, _ in running.values() if c == cat)
            peak[cat] = max(peak.get(cat, 0), now)
        elif event in END_EVENTS:
            running.pop(name, None)
    return peak, conflicts


ACCEPTANCE = {}


def verdict(number, title, ok, detail):
    """Record and print one acceptance line, then fail the test if the criterion failed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
