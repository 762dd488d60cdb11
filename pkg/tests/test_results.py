import logging
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterbench.profiler import RunRecord
from clusterbench.results import (SUMMARY_HEADER, ResultKey, ResultStore, algo_job_name, best_over_levels,
                                  efficiency_rows, parse_algo_job_name, population_stats, two_stage)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_one_instance():
    agg = two_stage({"1": [0.2, 0.4]})
    assert agg.mean == pytest.approx(0.3, abs=1e-12)
    assert agg.variance == pytest.approx(0.01, abs=1e-12)
    assert agg.count == 2


def test_two_instances():
    # instance means 0.3 and 0.5, variances 0.01 and 0.04
    agg = two_stage({"a": [0.2, 0.4], "b": [0.3, 0.7]})
    assert agg.mean == pytest.approx(0.4, abs=1e-12)
    assert agg.variance == pytest.approx(0.025, abs=1e-12)
    assert agg.count == 4


def test_single_value():
    agg = two_stage({"": [0.7]})
    assert (agg.mean, agg.variance, agg.count) == (0.7, 0.0, 1)


def test_empty_rejected():
    with pytest.raises(ValueError):
        two_stage({})


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text("ab12", min_size=1, max_size=3), st.lists(finite, min_size=1, max_size=6),
                       min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_order_invariance(per_instance, rnd):
    want = two_stage(per_instance)
    items = list(per_instance.items())
    rnd.shuffle(items)
    shuffled = {k: rnd.sample(v, len(v)) for k, v in items}
    got = two_stage(shuffled)
    assert got.mean == pytest.approx(want.mean, rel=1e-12, abs=1e-12)
    assert got.variance == pytest.approx(want.variance, rel=1e-12, abs=1e-12)
    assert got.variance >= 0 and got.count == want.count


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.lists(finite, min_size=30, max_size=30))
def test_equal_counts_mean_is_flat_mean(k, s, pool):
    per = {str(i): pool[i * s:(i + 1) * s] for i in range(k) if len(pool[i * s:(i + 1) * s]) == s}
    flat = [v for vals in per.values() for v in vals]
    assert two_stage(per).mean == pytest.approx(sum(flat) / len(flat), rel=1e-9, abs=1e-9)


def test_population_variance():
    assert population_stats([1.0, 2.0, 3.0, 4.0]) == (2.5, 1.25)


def test_best_over_levels_direction():
    assert best_over_levels([0.1, 0.5, 0.3], "nmi") == 0.5
    assert best_over_levels([0.1, 0.5, 0.3], "conductance") == 0.1


def test_key_validation():
    with pytest.raises(ValueError):
        ResultKey("a/b", "n", "", 0, 0, "nmi")
    with pytest.raises(ValueError):
        ResultKey("a", "n^1", "", 0, 0, "nmi")


def test_record_read_back_and_layout(tmp_path):
    store = ResultStore(tmp_path)
    key = ResultKey("louvain", "lfr", "3", 1, 0, "nmi")
    store.record(key, 0.1 + 0.2)
    assert store.get(key) == 0.1 + 0.2
    assert (tmp_path / "louvain" / "lfr^3" / "values.csv").exists()
    assert ResultStore(tmp_path).get(key) == 0.1 + 0.2
    assert ResultStore(tmp_path).items() == [(key, 0.1 + 0.2)]


def test_overwrite_warns(tmp_path, caplog):
    store = ResultStore(tmp_path)
    key = ResultKey("a", "n", "", 0, 0, "f1h")
    store.record(key, 0.5)
    with caplog.at_level(logging.WARNING):
        store.record(key, 0.6)
    assert store.get(key) == 0.6
    assert "overwriting" in caplog.text


def test_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        ResultStore(tmp_path).record(ResultKey("a", "n", "", 0, 0, "nmi"), float("nan"))


def test_store_aggregate_matches_in_memory(tmp_path):
    rng = random.Random(4)
    store = ResultStore(tmp_path)
    raw = {}
    items = []
    for inst in ("1", "2", "3"):
        for s in range(rng.randint(1, 4)):
            for lv in range(3):
                v = rng.random()
                raw.setdefault(inst, {}).setdefault(s, []).append(v)
                items.append((ResultKey("alg", "net", inst, s, lv, "omega"), v))
    rng.shuffle(items)
    store.record_many(items)
    want = two_stage({i: [max(lv) for lv in sh.values()] for i, sh in raw.items()})
    assert store.aggregate("omega", "alg", "net") == want
    with pytest.raises(KeyError):
        store.aggregate("nmi", "alg", "net")


def test_export_counts_and_determinism(tmp_path):
    store = ResultStore(tmp_path / "store")
    records = []
    for alg in ("b", "a"):
        for m in ("nmi", "omega", "f1a"):
            for s in range(2):
                store.record(ResultKey(alg, "pp", "1", s, 0, m), 0.25 * (s + 1))
        for s in range(2):
            records.append(RunRecord(algo_job_name(alg, "pp", "1", s), 1, 1.0 + s, 0.5, 20.0, 0, 0.0))
    records.append(RunRecord(algo_job_name("a", "pp", "1", 0), 2, 9.0, 9.0, 9.0, 1, 0.0))  # failed retry ignored
    records.append(RunRecord("nmi/a/pp^1/0/0", 1, 9.0, 9.0, 9.0, 0, 0.0))  # measure jobs are not algorithms
    out, eff = store.export_summary(tmp_path / "summary.csv", resources=records)
    lines = out.read_text().splitlines()
    assert lines[0] == SUMMARY_HEADER
    assert len(lines) == 7
    assert [l.split(",")[:3] for l in lines[1:]] == sorted(l.split(",")[:3] for l in lines[1:])
    assert lines[1] == "a,pp,f1a,0.375,0.015625,2"
    eff_lines = eff.read_text().splitlines()
    assert len(eff_lines) == 7
    assert "a,pp,wall_s,1.5,0.25,2" in eff_lines
    first = out.read_bytes()
    store.export_summary(tmp_path / "summary.csv", resources=records)
    assert out.read_bytes() == first


def test_export_empty_store(tmp_path):
    out, _ = ResultStore(tmp_path / "none").export_summary(tmp_path / "s.csv")
    assert out.read_text() == SUMMARY_HEADER + "\n"


def test_nine_significant_digits(tmp_path):
    store = ResultStore(tmp_path / "st")
    store.record(ResultKey("a", "n", "", 0, 0, "nmi"), 1 / 3)
    out, _ = store.export_summary(tmp_path / "s.csv")
    assert out.read_text().splitlines()[1] == "a,n,nmi,0.333333333,0,1"


def test_job_name_round_trip():
    assert parse_algo_job_name(algo_job_name("x", "lfr", "2", 3)) == ("x", "lfr", "2", 3)
    assert parse_algo_job_name(algo_job_name("x", "lfr", "", 0)) == ("x", "lfr", "", 0)
    assert parse_algo_job_name("nmi/x/lfr/0/1") is None
    assert efficiency_rows([]) == []
