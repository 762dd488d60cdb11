"""Resource profiling of child processes.

Wall time comes from a monotonic clock; CPU time and peak resident memory
from ``wait4`` accounting of the reaped child (user + system, ``ru_maxrss``),
topped up by periodic RSS sampling where the OS accounting is coarser.
Only the direct child and the descendants it reaps itself are covered, so
adapters must exec algorithms directly rather than through a shell.
"""
import csv
import io
import logging
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import psutil

logger = logging.getLogger(__name__)

CSV_HEADER = "job,attempt,wall_s,cpu_s,peak_rss_mib,exit,started"
EXIT_NOT_STARTED = 127
MIB = 1024 * 1024

_append_lock = threading.Lock()


@dataclass
class RunRecord:
    job: str
    attempt: int
    wall_time: float
    cpu_time: float
    peak_rss: float  # MiB
    exit_code: int  # negative: terminated by that signal
    started_at: float  # epoch seconds

    @property
    def started_iso(self):
        return datetime.fromtimestamp(self.started_at, timezone.utc).isoformat(timespec="milliseconds")

    def row(self):
        return [self.job, self.attempt, f"{self.wall_time:.6f}", f"{self.cpu_time:.6f}",
                f"{self.peak_rss:.3f}", self.exit_code, self.started_iso]


def bind_affinity(pid, cpuset):
    """Pin ``pid`` to ``cpuset``; a process that already exited is skipped with a warning."""
    cpus = set(cpuset)
    if not cpus:
        raise ValueError("refusing to bind to an empty CPU set")
    if not hasattr(os, "sched_setaffinity"):
        logger.warning("CPU affinity is not supported on this platform")
        return False
    try:
        os.sched_setaffinity(pid, cpus)
    except ProcessLookupError:
        logger.warning("pid %d exited before it could be bound to CPUs %s", pid, sorted(cpus))
        return False
    except OSError as exc:
        # the topology may describe CPUs this host does not have (manual map)
        logger.warning("cannot bind pid %d to CPUs %s: %s", pid, sorted(cpus), exc)
        return False
    return True


def rss_mib(pid):
    try:
        return psutil.Process(pid).memory_info().rss / MIB
    except (psutil.Error, OSError):
        return 0.0


class ChildProcess:
    """A spawned child that is reaped with ``wait4`` so its rusage is kept."""

    def __init__(self, argv, cwd=None, stdout=None, stderr=None, cpuset=None, env=None):
        self.argv = [str(a) for a in argv]
        self.started_at = time.time()
        self._t0 = time.monotonic()
        self.exit_code = None
        self.wall_time = None
        self.cpu_time = 0.0
        self.peak_rss = 0.0
        outs = [open(p, "wb") if p is not None else subprocess.DEVNULL for p in (stdout, stderr)]
        try:
            self.proc = subprocess.Popen(self.argv, cwd=cwd, stdout=outs[0], stderr=outs[1],
                                         stdin=subprocess.DEVNULL, env=env)
        finally:
            for f in outs:
                if f is not subprocess.DEVNULL:
                    f.close()
        self.pid = self.proc.pid
        if cpuset:
            bind_affinity(self.pid, cpuset)

    @property
    def elapsed(self):
        return self.wall_time if self.wall_time is not None else time.monotonic() - self._t0

    @property
    def done(self):
        return self.exit_code is not None

    def sample(self):
        """Current RSS in MiB; also tracks the observed peak."""
        if self.done:
            return 0.0
        rss = rss_mib(self.pid)
        self.peak_rss = max(self.peak_rss, rss)
        return rss

    def poll(self, block=False):
        """Reap the child if it exited. Returns True once it has been reaped."""
        if self.done:
            return True
        try:
            pid, status, usage = os.wait4(self.pid, 0 if block else os.WNOHANG)
        except ChildProcessError:
            # reaped elsewhere; nothing to account
            self._finish(self.proc.returncode if self.proc.returncode is not None else -signal.SIGKILL, None)
            return True
        if pid == 0:
            return False
        self._finish(os.waitstatus_to_exitcode(status), usage)
        return True

    def _finish(self, code, usage):
        self.wall_time = time.monotonic() - self._t0
        self.exit_code = code
        self.proc.returncode = code
        if usage is not None:
            self.cpu_time = usage.ru_utime + usage.ru_stime
            # ru_maxrss is in KiB on Linux
            self.peak_rss = max(self.peak_rss, usage.ru_maxrss / 1024.0)

    def terminate(self, grace=1.0):
        """SIGTERM, then SIGKILL after ``grace`` seconds; reaps the child."""
        if self.done:
            return
        for sig, wait in ((signal.SIGTERM, grace), (signal.SIGKILL, 5.0)):
            try:
                os.kill(self.pid, sig)
            except ProcessLookupError:
                pass
            deadline = time.monotonic() + wait
            while time.monotonic() < deadline:
                if self.poll():
                    return
                time.sleep(0.01)
        self.poll(block=True)

    def kill(self):
        self.terminate(grace=0.0)

    def record(self, job="", attempt=1):
        return RunRecord(job, attempt, max(self.elapsed, 0.0), self.cpu_time, self.peak_rss,
                         self.exit_code if self.exit_code is not None else -signal.SIGKILL, self.started_at)


def failed_start_record(job, attempt, exc=None):
    if exc is not None:
        logger.error("job %s: cannot start: %s", job, exc)
    return RunRecord(job, attempt, 0.0, 0.0, 0.0, EXIT_NOT_STARTED, time.time())


def profile_child(argv, cpuset=None, timeout=None, job="", attempt=1, cwd=None,
                  stdout=None, stderr=None, sample_period=1.0, poll_period=0.01):
    """Run ``argv`` to completion (or ``timeout`` seconds) and return its RunRecord."""
    if not argv:
        raise ValueError("empty argv")
    try:
        child = ChildProcess(argv, cwd=cwd, stdout=stdout, stderr=stderr, cpuset=cpuset)
    except OSError as exc:
        return failed_start_record(job, attempt, exc)
    next_sample = 0.0
    while not child.poll():
        now = child.elapsed
        if timeout is not None and now >= timeout:
            child.terminate()
            break
        if now >= next_sample:
            child.sample()
            next_sample = now + sample_period
        time.sleep(poll_period)
    return child.record(job, attempt)


def append_record(record, logpath):
    """Append one CSV line to ``logpath``, writing the header for a new file."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(record.row())
    line = buf.getvalue()
    with _append_lock:
        fresh = not os.path.exists(logpath) or os.path.getsize(logpath) == 0
        with open(logpath, "a", encoding="utf-8") as fh:
            fh.write((CSV_HEADER + "\n" + line) if fresh else line)
            fh.flush()
            os.fsync(fh.fileno())


def read_records(logpath):
    if not Path(logpath).exists():
        return []
    with open(logpath, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        started = datetime.fromisoformat(r["started"]).timestamp()
        out.append(RunRecord(r["job"], int(r["attempt"]), float(r["wall_s"]), float(r["cpu_s"]),
                             float(r["peak_rss_mib"]), int(r["exit"]), started))
    return out
