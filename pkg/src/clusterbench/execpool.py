"""Constraint-aware execution pool for external processes.

Jobs are started one per free affinity slot of their category's policy,
profiled while they run, and reaped with their resource accounting. A
single control thread drives everything: starting, reaping, per-job
timeouts with optional restart, the global timeout and the low-memory
watchdog that kills and postpones a worker when the pool's total resident
memory crosses its limit.
"""
import enum
import json
import logging
import math
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import psutil

from . import profiler
from .topology import AffinityPolicy, detect_topology, slots_for
from .webmon import JobView, StateSnapshot, SystemSummary, TaskView

logger = logging.getLogger(__name__)


class JobState(enum.Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    POSTPONED = "Postponed"
    DONE = "Done"
    FAILED = "Failed"
    TIMEDOUT = "TimedOut"
    KILLED = "Killed"

    @property
    def terminal(self):
        return self in TERMINAL


TERMINAL = frozenset({JobState.DONE, JobState.FAILED, JobState.TIMEDOUT, JobState.KILLED})
FAILURES = frozenset({JobState.FAILED, JobState.TIMEDOUT, JobState.KILLED})

DEFAULT_POLICIES = {
    "algorithm": AffinityPolicy.PHYS_CORE,
    "measure": AffinityPolicy.LOGICAL_CPU,
    "measure_mt": AffinityPolicy.NUMA_NODE,
}


class PoolError(RuntimeError):
    pass


class SubmitError(PoolError):
    pass


def _safe_filename(name):
    return re.sub(r"[^\w.^+=@-]", "_", name)


class Task:
    """A named group of jobs and subtasks; its state is derived from them."""

    def __init__(self, name, parent=None, onstart=None, ondone=None):
        self.name = name
        self.parent = None
        self.children = []
        self.onstart = onstart
        self.ondone = ondone
        self._started = False
        self._finished = False
        if parent is not None:
            parent.add(self)

    def add(self, child):
        if isinstance(child, Task):
            node = self
            while node is not None:
                if node is child:
                    raise ValueError(f"adding task {child.name!r} to {self.name!r} would form a cycle")
                node = node.parent
            if child.parent is not None and child.parent is not self:
                raise ValueError(f"task {child.name!r} already has a parent")
            child.parent = self
        else:
            child.task = self
        if child not in self.children:
            self.children.append(child)
        return child

    @property
    def path(self):
        names = []
        node = self
        while node is not None:
            names.append(node.name)
            node = node.parent
        return "/".join(reversed(names))

    def jobs(self):
        for c in self.children:
            if isinstance(c, Task):
                yield from c.jobs()
            else:
                yield c

    @property
    def state(self):
        states = [j.state for j in self.jobs()]
        if not states:
            return JobState.PENDING
        if any(s in FAILURES for s in states):
            return JobState.FAILED
        if all(s is JobState.DONE for s in states):
            return JobState.DONE
        if any(s is JobState.RUNNING for s in states):
            return JobState.RUNNING
        return JobState.PENDING

    def __repr__(self):
        return f"Task({self.path!r}, {self.state.value})"


@dataclass(eq=False)
class Job:
    name: str
    argv: list
    workdir: str = "."
    category: str = "algorithm"
    timeout: Optional[float] = None
    restarts_on_timeout: int = 0
    stdout: Optional[str] = None
    stderr: Optional[str] = None
    onstart: Optional[Callable] = None
    ondone: Optional[Callable] = None
    task: Optional[Task] = None
    env: Optional[dict] = None

    state: JobState = field(default=JobState.PENDING, init=False)
    attempts: int = field(default=0, init=False)
    postpones: int = field(default=0, init=False)
    tstart: Optional[float] = field(default=None, init=False)
    tstop: Optional[float] = field(default=None, init=False)
    rss: Optional[float] = field(default=None, init=False)
    exit_code: Optional[int] = field(default=None, init=False)
    records: list = field(default_factory=list, init=False)
    cpuset: Optional[frozenset] = field(default=None, init=False)
    _child: object = field(default=None, init=False, repr=False)
    _timeouts: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"job name must be non-empty without whitespace: {self.name!r}")
        if not self.argv:
            raise ValueError(f"job {self.name}: empty argv")
        if self.task is not None:
            self.task.add(self)

    @property
    def duration(self):
        if self.tstart is None:
            return None
        end = self.tstop if self.tstop is not None else time.time()
        return max(end - self.tstart, 0.0)

    def elapsed(self, now=None):
        if self.tstart is None:
            return 0.0
        return (now if now is not None else time.time()) - self.tstart


@dataclass
class PoolConfig:
    policy_by_category: dict = field(default_factory=lambda: dict(DEFAULT_POLICIES))
    mem_limit_fraction: float = 0.9
    mem_limit_mib: Optional[float] = None  # absolute limit, overrides the fraction
    global_timeout: Optional[float] = None
    max_workers_override: Optional[int] = None
    watchdog_period: float = 1.0
    max_postpones: int = 3
    poll_period: float = 0.02
    term_grace: float = 1.0
    bind: bool = True

    def __post_init__(self):
        if not 0.0 < self.mem_limit_fraction <= 1.0:
            raise ValueError("mem_limit_fraction must lie in (0, 1]")
        self.policy_by_category = {k: v if isinstance(v, AffinityPolicy) else AffinityPolicy.parse(v)
                                   for k, v in self.policy_by_category.items()}

    def mem_limit(self, total_ram_mib=None):
        if self.mem_limit_mib is not None:
            return float(self.mem_limit_mib)
        if total_ram_mib is None:
            total_ram_mib = psutil.virtual_memory().total / profiler.MIB
        return self.mem_limit_fraction * total_ram_mib


@dataclass
class RunSummary:
    counts: dict
    submitted: int
    elapsed: float
    timed_out: bool = False

    @property
    def failures(self):
        return sum(self.counts.get(s.value, 0) for s in FAILURES)

    @property
    def ok(self):
        return self.failures == 0


def memory_watchdog_tick(running, limit_mib, now=None):
    """Pick the worker to kill when the pool is over its memory limit.

    ``running`` holds ``(job, rss_mib)`` pairs. Workers whose RSS exceeds the
    mean RSS form the heavy group; with two or more heavy workers the one
    that started last is the victim. A single heavy worker is the victim
    and the pool should also shrink its worker cap. Returns
    ``(victim, shrink)``, victim being None under the limit.
    """
    if not running:
        return None, False
    total = sum(r for _, r in running)
    if total <= limit_mib:
        return None, False
    mean = total / len(running)
    heavy = [(j, r) for j, r in running if r > mean]
    if not heavy:
        # equal footprints: every worker is among the heaviest
        heavy = list(running)
    if len(heavy) == 1:
        return heavy[0][0], True
    now = time.time() if now is None else now
    victim = min(heavy, key=lambda jr: (jr[0].elapsed(now), -jr[1]))[0]
    return victim, False


class ExecPool:
    def __init__(self, cfg=None, workdir=".", topology=None, resources_log=None,
                 event_log=None, rss_sampler=None, total_ram_mib=None):
        self.cfg = cfg or PoolConfig()
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.topology = topology or detect_topology()
        self.resources_log = Path(resources_log) if resources_log else self.workdir / "resources.csv"
        self.event_log = Path(event_log) if event_log else self.workdir / "pool.log"
        self._sample_rss = rss_sampler or (lambda job: job._child.sample())
        self.total_ram_mib = total_ram_mib or psutil.virtual_memory().total / profiler.MIB
        self.mem_limit_mib = self.cfg.mem_limit(self.total_ram_mib)

        self._slots = {cat: slots_for(pol, self.topology) for cat, pol in self.cfg.policy_by_category.items()}
        self.jobs = {}
        self.tasks = []
        self._queue = deque()
        self._postponed = []
        self._running = []
        self._busy = set()
        self._closed = False
        # submit() may be called from another thread while run_loop() runs
        self._lock = threading.RLock()
        self.worker_cap = self.cfg.max_workers_override or math.inf
        self.watchdog_kills = 0
        self.requeues = 0
        self.snapshot_published = None
        self._events = open(self.event_log, "a", encoding="utf-8")
        self._event("-", "pool", f"topology={self.topology.triples()!r} mem_limit_mib={self.mem_limit_mib:.1f}")

    # ------------------------------------------------------------- lifecycle

    def submit(self, job):
        with self._lock:
            if self._closed:
                raise SubmitError("pool is shut down")
            if job.name in self.jobs:
                raise SubmitError(f"duplicate job name {job.name!r}")
            if job.category not in self._slots:
                raise SubmitError(f"no affinity policy for category {job.category!r}")
            if job.stdout is None or job.stderr is None:
                logs = Path(job.workdir) / "logs"
                base = _safe_filename(job.name)
                job.stdout = job.stdout or str(logs / f"{base}.out")
                job.stderr = job.stderr or str(logs / f"{base}.err")
            job.state = JobState.PENDING
            self.jobs[job.name] = job
            self._queue.append(job)
            self._event(job.name, "submit", f"category={job.category}")
            return job

    def add_task(self, task):
        if task.parent is None and task not in self.tasks:
            self.tasks.append(task)
        return task

    def shutdown(self):
        if self._running:
            self._terminate_all(JobState.KILLED, "shutdown")
        self._closed = True
        if not self._events.closed:
            self._events.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    # ----------------------------------------------------------------- events

    def _event(self, name, event, detail="", level="INFO"):
        ts = datetime.now(timezone.utc).isoformat(timespec="microseconds")
        line = f"{ts} {level} {name} {event} {detail}".rstrip()
        if not self._events.closed:
            self._events.write(line + "\n")
            self._events.flush()
        logger.log(logging.getLevelName(level), "%s %s %s", name, event, detail)

    def _callback(self, owner, fn, *args):
        if fn is None:
            return
        try:
            fn(*args)
        except Exception:  # callbacks must never take the pool down
            logger.exception("callback of %s raised", owner)
            self._event(owner, "callback_error", "see log", level="ERROR")

    # ------------------------------------------------------------- scheduling

    def _free_slot(self, category):
        for cpus in self._slots[category]:
            if not (cpus & self._busy):
                return cpus
        return None

    def _start(self, job, cpus):
        job.attempts += 1
        job.state = JobState.RUNNING
        job.tstart = time.time()
        job.tstop = None
        job.rss = None
        job.exit_code = None
        Path(job.stdout).parent.mkdir(parents=True, exist_ok=True)
        Path(job.stderr).parent.mkdir(parents=True, exist_ok=True)
        try:
            job._child = profiler.ChildProcess(job.argv, cwd=job.workdir, stdout=job.stdout, stderr=job.stderr,
                                               cpuset=cpus if self.cfg.bind else None, env=job.env)
        except OSError as exc:
            record = profiler.failed_start_record(job.name, job.attempts, exc)
            self._event(job.name, "start_failed", str(exc).replace("\n", " "), level="ERROR")
            self._finish(job, record, JobState.FAILED)
            return
        job.cpuset = cpus
        self._busy |= cpus
        self._running.append(job)
        cpu_list = ",".join(map(str, sorted(cpus)))
        self._event(job.name, "start", f"attempt={job.attempts} category={job.category} pid={job._child.pid} cpus={cpu_list}")
        self._task_started(job.task)
        self._callback(job.name, job.onstart, job)

    def _release(self, job):
        if job in self._running:
            self._running.remove(job)
        if job.cpuset:
            self._busy -= job.cpuset

    def _finish(self, job, record, state):
        job.records.append(record)
        job.exit_code = record.exit_code
        job.tstop = time.time()
        job.state = state
        try:
            profiler.append_record(record, self.resources_log)
        except OSError as exc:
            raise PoolError(f"cannot write {self.resources_log}: {exc}") from exc
        if state.terminal:
            level = "INFO" if state is JobState.DONE else "WARNING"
            self._event(job.name, state.value.lower(), f"attempt={job.attempts} exit={record.exit_code}", level=level)
            self._callback(job.name, job.ondone, job)
            self._task_finished(job.task)

    def _task_started(self, task):
        while task is not None:
            if not task._started:
                task._started = True
                self._callback(task.path, task.onstart, task)
            task = task.parent

    def _task_finished(self, task):
        while task is not None:
            if not task._finished and all(j.state.terminal for j in task.jobs()):
                task._finished = True
                self._event(task.path, "task_" + task.state.value.lower())
                self._callback(task.path, task.ondone, task)
            task = task.parent

    def _schedule(self):
        blocked = set()
        started = []
        for job in list(self._queue):
            if len(self._running) >= self.worker_cap:
                break
            if job.category in blocked:
                continue
            cpus = self._free_slot(job.category)
            if cpus is None:
                blocked.add(job.category)
                continue
            self._queue.remove(job)
            started.append(job)
            self._start(job, cpus)
        return started

    def reap_and_notify(self):
        """Collect exited children; fire callbacks. Returns the jobs that completed."""
        done = []
        for job in list(self._running):
            if not job._child.poll():
                continue
            self._release(job)
            record = job._child.record(job.name, job.attempts)
            self._finish(job, record, JobState.DONE if record.exit_code == 0 else JobState.FAILED)
            done.append(job)
        return done

    def _check_timeouts(self):
        for job in list(self._running):
            if job.timeout is None or job._child.elapsed < job.timeout:
                continue
            job._child.terminate(self.cfg.term_grace)
            self._release(job)
            record = job._child.record(job.name, job.attempts)
            if job._timeouts < job.restarts_on_timeout:
                job._timeouts += 1
                job.records.append(record)
                profiler.append_record(record, self.resources_log)
                job.state = JobState.PENDING
                job.tstop = time.time()
                self._queue.appendleft(job)
                self._event(job.name, "restart", f"attempt={job.attempts} timeout={job.timeout}", level="WARNING")
            else:
                self._finish(job, record, JobState.TIMEDOUT)

    def _watchdog(self):
        samples = []
        for job in self._running:
            rss = self._sample_rss(job)
            job.rss = rss
            samples.append((job, rss))
        victim, shrink = memory_watchdog_tick(samples, self.mem_limit_mib)
        if victim is None:
            return None
        total = sum(r for _, r in samples)
        if shrink:
            self.worker_cap = max(1, min(self.worker_cap, len(self._running)) - 1)
        victim._child.kill()
        self._release(victim)
        record = victim._child.record(victim.name, victim.attempts)
        self.watchdog_kills += 1
        victim.postpones += 1
        detail = f"rss={victim.rss:.1f} total={total:.1f} limit={self.mem_limit_mib:.1f} cap={self.worker_cap}"
        if victim.postpones > self.cfg.max_postpones:
            self._event(victim.name, "postpone_exhausted", detail, level="WARNING")
            self._finish(victim, record, JobState.KILLED)
        else:
            victim.records.append(record)
            profiler.append_record(record, self.resources_log)
            victim.state = JobState.POSTPONED
            victim.tstop = time.time()
            self._postponed.append(victim)
            self._event(victim.name, "postpone", detail, level="WARNING")
        return victim

    def _resume_postponed(self):
        """Requeue postponed jobs once their last footprint fits next to the running ones."""
        if not self._postponed:
            return
        load = sum(j.rss or 0.0 for j in self._running)
        for job in list(self._postponed):
            need = job.rss or 0.0
            if self._running and load + need > self.mem_limit_mib:
                continue
            self._postponed.remove(job)
            job.state = JobState.PENDING
            self._queue.appendleft(job)
            self.requeues += 1
            load += need
            self._event(job.name, "requeue", f"postpones={job.postpones}")

    def _terminate_all(self, state, reason):
        for job in list(self._running):
            job._child.terminate(self.cfg.term_grace)
            self._release(job)
            self._finish(job, job._child.record(job.name, job.attempts), state)
            self._event(job.name, reason)

    def _kill_waiting(self, reason):
        for job in list(self._queue) + list(self._postponed):
            job.state = JobState.KILLED
            job.tstop = time.time()
            self._event(job.name, "killed", reason, level="WARNING")
            self._callback(job.name, job.ondone, job)
            self._task_finished(job.task)
        self._queue.clear()
        self._postponed.clear()

    def run_loop(self):
        """Run until every submitted job is terminal; returns a RunSummary."""
        if self._closed:
            raise PoolError("pool is shut down")
        t0 = time.monotonic()
        next_watchdog = t0 + self.cfg.watchdog_period
        next_publish = 0.0
        timed_out = False
        self._event("-", "run_start", f"queued={len(self._queue)}")
        while self._queue or self._running or self._postponed:
            with self._lock:
                now = time.monotonic()
                if self.cfg.global_timeout is not None and now - t0 >= self.cfg.global_timeout:
                    timed_out = True
                    self._event("-", "global_timeout", f"after={now - t0:.1f}s", level="WARNING")
                    self._terminate_all(JobState.TIMEDOUT, "global_timeout")
                    self._kill_waiting("global_timeout")
                    break
                changed = bool(self.reap_and_notify())
                self._check_timeouts()
                if now >= next_watchdog:
                    next_watchdog = now + self.cfg.watchdog_period
                    changed |= self._watchdog() is not None
                self._resume_postponed()
                if len(self._running) < self.worker_cap and self._queue:
                    changed |= bool(self._schedule())
                if self._queue and not self._running and not self._postponed \
                        and all(self._free_slot(j.category) is None for j in self._queue):
                    raise PoolError("queued jobs can never be scheduled: no slot fits them")
                if changed or now >= next_publish:
                    self.publish_snapshot()
                    next_publish = now + 0.5
            time.sleep(self.cfg.poll_period)
        self.publish_snapshot()
        self.save_snapshot()
        counts = {}
        for job in self.jobs.values():
            counts[job.state.value] = counts.get(job.state.value, 0) + 1
        summary = RunSummary(counts, len(self.jobs), time.monotonic() - t0, timed_out)
        self._event("-", "run_end", json.dumps(counts, sort_keys=True).replace(" ", ""))
        return summary

    # ------------------------------------------------------------- snapshots

    def _job_view(self, job):
        return JobView(name=job.name, task=job.task.path if job.task else "", state=job.state.value,
                       tstart=job.tstart, duration=job.duration, rss=job.rss, attempts=job.attempts,
                       category=job.category)

    def _task_view(self, task, jobs_pred=None):
        children = [self._task_view(c, jobs_pred) for c in task.children if isinstance(c, Task)]
        jobs = [self._job_view(j) for j in task.children if isinstance(j, Job) and (jobs_pred is None or jobs_pred(j))]
        return TaskView(name=task.name, path=task.path, state=task.state.value, jobs=jobs,
                        tasks=[c for c in children if c is not None])

    def snapshot(self):
        """Build an immutable view of the current state (control thread only)."""
        roots = list(self.tasks)
        for job in self.jobs.values():
            t = job.task
            while t is not None and t.parent is not None:
                t = t.parent
            if t is not None and t not in roots:
                roots.append(t)
        vm = psutil.virtual_memory()
        try:
            load = os.getloadavg()
        except OSError:
            load = (0.0, 0.0, 0.0)
        system = SystemSummary(
            ram_total_mib=vm.total / profiler.MIB, ram_used_mib=(vm.total - vm.available) / profiler.MIB,
            load_avg=tuple(load), workers=len(self._running),
            worker_cap=None if self.worker_cap == math.inf else int(self.worker_cap),
            pending=len(self._queue) + len(self._postponed), cpus=len(self.topology.cpus))
        active = [j for j in self.jobs.values() if not j.state.terminal]
        failed_roots = [r for r in roots if r.state is JobState.FAILED]
        failures = [self._task_view(r, lambda j: j.state in FAILURES) for r in failed_roots]
        loose_failed = [self._job_view(j) for j in self.jobs.values() if j.task is None and j.state in FAILURES]
        return StateSnapshot(
            timestamp=time.time(), system=system,
            jobs=[self._job_view(j) for j in active],
            tasks=[self._task_view(r) for r in roots if not r.state.terminal],
            failures=failures, failed_jobs=loose_failed,
            all_jobs=[self._job_view(j) for j in self.jobs.values()])

    def publish_snapshot(self):
        self.snapshot_published = self.snapshot()
        return self.snapshot_published

    def save_snapshot(self, path=None):
        path = Path(path) if path else self.workdir / "state.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.snapshot_published.to_dict(), indent=1), encoding="utf-8")
        os.replace(tmp, path)
        return path
