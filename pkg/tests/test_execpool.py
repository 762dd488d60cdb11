import os
import time
from types import SimpleNamespace

import psutil
import pytest

from clusterbench.execpool import (ExecPool, Job, JobState, PoolConfig, PoolError, SubmitError, Task,
                                   memory_watchdog_tick)
from clusterbench.topology import AffinityPolicy, TopologyMap
from clusterbench.webmon import StateSnapshot

from conftest import replay_events, stub


def fake(name, started):
    return SimpleNamespace(name=name, elapsed=lambda now, t=started: now - t)


def make_pool(tmp_path, cpus=2, **cfg):
    cfg.setdefault("bind", False)
    cfg.setdefault("poll_period", 0.01)
    return ExecPool(PoolConfig(**cfg), workdir=tmp_path, topology=TopologyMap.flat(cpus))


def job(tmp_path, name, argv, **kw):
    return Job(name, argv, workdir=str(tmp_path), **kw)


# ---------------------------------------------------------------- watchdog rule

def test_watchdog_hand_trace():
    now = 100.0
    a, b, c = fake("A", now - 50), fake("B", now - 10), fake("C", now - 5)
    victim, shrink = memory_watchdog_tick([(a, 600), (b, 500), (c, 100)], 1000, now)
    assert victim is b and not shrink


def test_watchdog_under_limit():
    assert memory_watchdog_tick([(fake("A", 0), 300), (fake("B", 0), 100)], 1000, 10) == (None, False)
    assert memory_watchdog_tick([], 1000) == (None, False)


def test_watchdog_single_heavy_shrinks():
    a = fake("A", 0)
    assert memory_watchdog_tick([(a, 1200)], 1000, 10) == (a, True)
    b = fake("B", 5)
    assert memory_watchdog_tick([(a, 1100), (b, 10)], 1000, 10) == (a, True)


def test_watchdog_equal_footprints_pick_youngest():
    a, b = fake("A", 0), fake("B", 3)
    assert memory_watchdog_tick([(a, 600), (b, 600)], 1000, 10) == (b, False)


# ------------------------------------------------------------------ submission

def test_submit_validation(tmp_path):
    pool = make_pool(tmp_path)
    pool.submit(job(tmp_path, "a", ["true"]))
    with pytest.raises(SubmitError, match="duplicate"):
        pool.submit(job(tmp_path, "a", ["true"]))
    with pytest.raises(SubmitError, match="gpu"):
        pool.submit(job(tmp_path, "b", ["true"], category="gpu"))
    pool.shutdown()
    with pytest.raises(SubmitError):
        pool.submit(job(tmp_path, "c", ["true"]))


def test_job_validation():
    with pytest.raises(ValueError):
        Job("has space", ["true"])
    with pytest.raises(ValueError):
        Job("x", [])


def test_task_cycles_rejected():
    root = Task("root")
    child = Task("child", parent=root)
    with pytest.raises(ValueError, match="cycle"):
        child.add(root)
    assert child.path == "root/child"


# ------------------------------------------------------------------ scheduling

def test_slot_bound_and_fifo(tmp_path):
    pool = make_pool(tmp_path, cpus=2)
    names = [f"j{i}" for i in range(6)]
    for n in names:
        pool.submit(job(tmp_path, n, ["sleep", "0.2"]))
    summary = pool.run_loop()
    pool.shutdown()
    assert summary.counts == {"Done": 6} and summary.ok
    peak, conflicts = replay_events(tmp_path / "pool.log")
    assert peak == {"algorithm": 2} and conflicts == 0
    starts = [l.split()[2] for l in (tmp_path / "pool.log").read_text().splitlines() if l.split()[3] == "start"]
    assert starts == names


def test_third_job_waits(tmp_path):
    pool = make_pool(tmp_path, cpus=2)
    jobs = [pool.submit(job(tmp_path, f"w{i}", ["sleep", "0.3"])) for i in range(3)]
    pool._schedule()
    assert [j.state for j in jobs] == [JobState.RUNNING, JobState.RUNNING, JobState.PENDING]
    pool.run_loop()
    pool.shutdown()
    assert jobs[2].tstart >= min(jobs[0].tstop, jobs[1].tstop)


def test_categories_share_cpus(tmp_path):
    pool = make_pool(tmp_path, cpus=2)
    for i in range(4):
        pool.submit(job(tmp_path, f"a{i}", ["sleep", "0.1"]))
        pool.submit(job(tmp_path, f"m{i}", ["sleep", "0.1"], category="measure"))
    pool.run_loop()
    pool.shutdown()
    peak, conflicts = replay_events(tmp_path / "pool.log")
    assert conflicts == 0
    assert max(peak.values()) <= 2


def test_worker_cap_override(tmp_path):
    pool = make_pool(tmp_path, cpus=4, max_workers_override=1)
    for i in range(3):
        pool.submit(job(tmp_path, f"c{i}", ["sleep", "0.1"]))
    pool.run_loop()
    pool.shutdown()
    assert replay_events(tmp_path / "pool.log")[0] == {"algorithm": 1}


def test_unschedulable_queue(tmp_path):
    pool = make_pool(tmp_path, cpus=2, policy_by_category={"algorithm": AffinityPolicy.PHYS_CORE})
    pool._slots["algorithm"] = []
    pool.submit(job(tmp_path, "x", ["true"]))
    with pytest.raises(PoolError):
        pool.run_loop()
    pool.shutdown()


# ---------------------------------------------------------------- termination

def test_exit_codes_and_failures_view(tmp_path):
    pool = make_pool(tmp_path)
    t = pool.add_task(Task("t"))
    ok = pool.submit(job(tmp_path, "ok", ["true"], task=t))
    bad = pool.submit(job(tmp_path, "bad", stub("exitwith", 1), task=t))
    missing = pool.submit(job(tmp_path, "missing", ["/nonexistent/bin"]))
    summary = pool.run_loop()
    pool.shutdown()
    assert (ok.state, bad.state, missing.state) == (JobState.DONE, JobState.FAILED, JobState.FAILED)
    assert bad.exit_code == 1 and missing.exit_code == 127
    assert summary.failures == 2 and not summary.ok
    assert t.state is JobState.FAILED
    snap = pool.snapshot_published
    assert [j.name for tv in snap.failures for j in tv.jobs] == ["bad"]
    assert [j.name for j in snap.failed_jobs] == ["missing"]
    assert {j.name for j in snap.all_jobs} == {"ok", "bad", "missing"}
    assert StateSnapshot.load(tmp_path / "state.json") == snap


def test_timeout_restart_then_timedout(tmp_path):
    pool = make_pool(tmp_path, term_grace=0.2)
    j = pool.submit(job(tmp_path, "slow", ["sleep", "10"], timeout=0.3, restarts_on_timeout=1))
    pool.run_loop()
    pool.shutdown()
    assert j.state is JobState.TIMEDOUT
    assert j.attempts == 2 and len(j.records) == 2
    rows = (tmp_path / "resources.csv").read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["1", "2"]


def test_global_timeout(tmp_path):
    pool = make_pool(tmp_path, cpus=1, global_timeout=0.5, term_grace=0.2)
    running = pool.submit(job(tmp_path, "r", ["sleep", "10"]))
    waiting = pool.submit(job(tmp_path, "w", ["sleep", "10"]))
    summary = pool.run_loop()
    pool.shutdown()
    assert summary.timed_out
    assert (running.state, waiting.state) == (JobState.TIMEDOUT, JobState.KILLED)
    assert sum(summary.counts.values()) == summary.submitted == 2


def test_callbacks_and_containment(tmp_path):
    seen = []

    def boom(j):
        raise RuntimeError("callback failure")

    pool = make_pool(tmp_path)
    root = pool.add_task(Task("root", onstart=lambda t: seen.append(("start", t.name)),
                              ondone=lambda t: seen.append(("done", t.name, t.state))))
    pool.submit(job(tmp_path, "a", ["true"], task=root, ondone=boom, onstart=boom))
    pool.submit(job(tmp_path, "b", ["true"], task=root, ondone=lambda j: seen.append(("job", j.name, j.state))))
    summary = pool.run_loop()
    pool.shutdown()
    assert summary.counts == {"Done": 2}
    assert seen[0] == ("start", "root")
    assert ("job", "b", JobState.DONE) in seen
    assert seen[-1] == ("done", "root", JobState.DONE)
    assert "callback_error" in (tmp_path / "pool.log").read_text()


def test_no_zombies_left(tmp_path):
    pool = make_pool(tmp_path, cpus=2)
    for i in range(6):
        pool.submit(job(tmp_path, f"z{i}", ["true"] if i % 2 else ["sleep", "0.05"]))
    pool.run_loop()
    pool.shutdown()
    kids = psutil.Process(os.getpid()).children()
    assert not [k for k in kids if k.status() == psutil.STATUS_ZOMBIE]


def test_shutdown_kills_running(tmp_path):
    pool = make_pool(tmp_path, term_grace=0.1)
    j = pool.submit(job(tmp_path, "s", ["sleep", "10"]))
    pool._schedule()
    pool.shutdown()
    assert j.state is JobState.KILLED


# ------------------------------------------------------------ memory watchdog

def scripted_rss(values):
    return lambda j: values[j.name]


def test_watchdog_postpones_and_resumes(tmp_path):
    pool = ExecPool(PoolConfig(bind=False, poll_period=0.01, watchdog_period=0.05, mem_limit_mib=1000),
                    workdir=tmp_path, topology=TopologyMap.flat(3),
                    rss_sampler=scripted_rss({"A": 600, "B": 500, "C": 100}))
    a = pool.submit(job(tmp_path, "A", ["sleep", "0.8"]))
    time.sleep(0.05)
    b = pool.submit(job(tmp_path, "B", ["sleep", "0.3"]))
    c = pool.submit(job(tmp_path, "C", ["sleep", "0.3"]))
    summary = pool.run_loop()
    pool.shutdown()
    assert summary.counts == {"Done": 3}
    assert b.postpones >= 1 and a.postpones == 0 and c.postpones == 0
    assert b.attempts == b.postpones + 1
    log = (tmp_path / "pool.log").read_text()
    assert "B postpone" in log and "B requeue" in log
    assert pool.watchdog_kills == pool.requeues


def test_watchdog_single_oversized_job_exhausts(tmp_path):
    pool = ExecPool(PoolConfig(bind=False, poll_period=0.01, watchdog_period=0.05, mem_limit_mib=1000,
                               max_postpones=2), workdir=tmp_path, topology=TopologyMap.flat(2),
                    rss_sampler=scripted_rss({"big": 1200}))
    big = pool.submit(job(tmp_path, "big", ["sleep", "5"]))
    summary = pool.run_loop()
    pool.shutdown()
    assert big.state is JobState.KILLED
    assert summary.counts == {"Killed": 1}
    assert pool.worker_cap == 1
    assert big.attempts == 3 and big.postpones == 3
    killed_terminal = 1
    assert pool.watchdog_kills == pool.requeues + killed_terminal
