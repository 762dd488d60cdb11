"""Hierarchical result store and two-stage aggregation.

Layout under the store root::

    <algorithm>/<nettype>[^<instance>]/values.csv   rows: shuffle,level,measure,value

Aggregation of one (algorithm, nettype, measure):

1. per shuffle, the best value over its levels (min for LowerBetter measures);
2. per instance, population mean and variance over its shuffles;
3. per nettype, the mean of the instance means and of the instance variances.
"""
import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .measures import MEASURES
from .netdata import net_dirname
from .profiler import read_records

logger = logging.getLogger(__name__)

LEAF = "values.csv"
LEAF_HEADER = ["shuffle", "level", "measure", "value"]
SUMMARY_HEADER = "algorithm,nettype,measure,mean,variance,count"
EFFICIENCY_MEASURES = ("wall_s", "cpu_s", "peak_rss_mib")


@dataclass(frozen=True, order=True)
class ResultKey:
    algorithm: str
    nettype: str
    instance: str
    shuffle: int
    level: int
    measure: str

    def __post_init__(self):
        for name in ("algorithm", "nettype", "instance", "measure"):
            v = getattr(self, name)
            if "/" in v or "^" in v or "," in v or (name != "instance" and not v):
                raise ValueError(f"bad {name} {v!r} in result key")


@dataclass(frozen=True)
class Aggregate:
    mean: float
    variance: float
    count: int


def fmt9(x):
    return format(x, ".9g")


def lower_is_better(measure):
    info = MEASURES.get(measure)
    return info is not None and info.direction == "LowerBetter"


def population_stats(values):
    values = list(values)
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, var


def two_stage(per_instance):
    """Aggregate ``{instance: [per-shuffle value, ...]}``."""
    stats = [population_stats(vals) for _, vals in sorted(per_instance.items()) if vals]
    if not stats:
        raise ValueError("nothing to aggregate")
    mean = math.fsum(m for m, _ in stats) / len(stats)
    var = math.fsum(v for _, v in stats) / len(stats)
    count = sum(len(v) for v in per_instance.values())
    return Aggregate(mean, max(var, 0.0), count)


def best_over_levels(level_values, measure):
    return min(level_values) if lower_is_better(measure) else max(level_values)


class ResultStore:
    def __init__(self, root):
        self.root = Path(root)

    def leaf(self, algorithm, nettype, instance):
        return self.root / algorithm / net_dirname(nettype, instance) / LEAF

    @staticmethod
    def _read_leaf(path):
        rows = {}
        if not path.exists():
            return rows
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows[(int(r["shuffle"]), int(r["level"]), r["measure"])] = float(r["value"])
        return rows

    @staticmethod
    def _write_leaf(path, rows):
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEAF_HEADER)
            for (s, lv, m), v in sorted(rows.items()):
                # repr keeps the stored value bit-exact
                w.writerow([s, lv, m, repr(v)])
        os.replace(tmp, path)

    def record_many(self, items):
        """Upsert ``(ResultKey, value)`` pairs, one rewrite per touched leaf."""
        by_leaf = defaultdict(list)
        for key, value in items:
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"refusing non-finite value {value} for {key}")
            by_leaf[(key.algorithm, key.nettype, key.instance)].append((key, value))
        for (alg, nt, inst), entries in by_leaf.items():
            path = self.leaf(alg, nt, inst)
            rows = self._read_leaf(path)
            for key, value in entries:
                k = (key.shuffle, key.level, key.measure)
                if k in rows and rows[k] != value:
                    logger.warning("overwriting %s: %r -> %r", key, rows[k], value)
                rows[k] = value
            self._write_leaf(path, rows)

    def record(self, key, value):
        self.record_many([(key, value)])

    def get(self, key):
        rows = self._read_leaf(self.leaf(key.algorithm, key.nettype, key.instance))
        return rows[(key.shuffle, key.level, key.measure)]

    def items(self):
        """All stored ``(ResultKey, value)`` pairs in key order."""
        out = []
        if not self.root.exists():
            return out
        for leaf in sorted(self.root.glob(f"*/*/{LEAF}")):
            algorithm = leaf.parent.parent.name
            nettype, _, instance = leaf.parent.name.partition("^")
            for (s, lv, m), v in self._read_leaf(leaf).items():
                out.append((ResultKey(algorithm, nettype, instance, s, lv, m), v))
        return sorted(out)

    def groups(self):
        return sorted({(k.algorithm, k.nettype, k.measure) for k, _ in self.items()})

    def per_shuffle(self, measure, algorithm, nettype):
        """``{instance: {shuffle: best value over levels}}``."""
        levels = defaultdict(lambda: defaultdict(list))
        for k, v in self.items():
            if (k.algorithm, k.nettype, k.measure) == (algorithm, nettype, measure):
                levels[k.instance][k.shuffle].append(v)
        return {inst: {s: best_over_levels(vals, measure) for s, vals in sh.items()}
                for inst, sh in levels.items()}

    def aggregate(self, measure, algorithm, nettype):
        per = self.per_shuffle(measure, algorithm, nettype)
        if not per:
            raise KeyError(f"no values for {algorithm}/{nettype}/{measure}")
        return two_stage({inst: list(sh.values()) for inst, sh in per.items()})

    def export_summary(self, outpath, resources=None, efficiency_path=None):
        """Write the quality summary; with ``resources`` also the efficiency summary.

        Efficiency rows go to ``efficiency_path`` (default
        ``<outpath stem>_efficiency.csv``) so that the quality summary stays
        free of timing noise.
        """
        outpath = Path(outpath)
        rows = [(a, n, m, self.aggregate(m, a, n)) for a, n, m in self.groups()]
        _write_summary(outpath, rows)
        if resources is not None:
            efficiency_path = Path(efficiency_path) if efficiency_path else \
                outpath.with_name(outpath.stem + "_efficiency" + outpath.suffix)
            _write_summary(efficiency_path, efficiency_rows(resources))
            return outpath, efficiency_path
        return outpath, None


def _write_summary(path, rows):
    lines = [SUMMARY_HEADER]
    for a, n, m, agg in sorted(rows, key=lambda r: r[:3]):
        lines.append(f"{a},{n},{m},{fmt9(agg.mean)},{fmt9(agg.variance)},{agg.count}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# ------------------------------------------------------------------ efficiency

def algo_job_name(algorithm, nettype, instance, shuffle):
    return f"{algorithm}/{net_dirname(nettype, instance)}/{shuffle}"


def parse_algo_job_name(name):
    """Inverse of :func:`algo_job_name`; None for other jobs."""
    parts = name.split("/")
    if len(parts) != 3 or not parts[2].isdigit():
        return None
    nettype, _, instance = parts[1].partition("^")
    return parts[0], nettype, instance, int(parts[2])


def efficiency_rows(resources):
    """Two-stage aggregates of wall time, CPU time and peak RSS per (algorithm, nettype).

    Uses the last successful attempt of every algorithm job in
    ``resources`` (a resources.csv path or a list of RunRecords).
    """
    records = read_records(resources) if isinstance(resources, (str, os.PathLike)) else list(resources)
    last = {}
    for rec in records:
        key = parse_algo_job_name(rec.job)
        if key is None or rec.exit_code != 0:
            continue
        last[key] = rec
    groups = defaultdict(lambda: defaultdict(list))
    for (alg, nt, inst, _), rec in sorted(last.items()):
        for m, v in zip(EFFICIENCY_MEASURES, (rec.wall_time, rec.cpu_time, rec.peak_rss)):
            groups[(alg, nt, m)][inst].append(v)
    return [(a, n, m, two_stage(per)) for (a, n, m), per in groups.items()]
