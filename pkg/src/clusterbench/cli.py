"""Command line driver.

``clusterbench run`` executes the whole benchmark: shuffle the input
networks, run every algorithm on every shuffle, unify the output levels,
evaluate every level with every measure, aggregate and export. The other
subcommands expose single steps.

Exit codes: 0 success, 1 some jobs or evaluations failed, 2 bad configuration.
"""
import argparse
import glob
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import algos, netdata

logger = logging.getLogger("clusterbench")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    datasets: list = field(default_factory=list)
    shuffles: int = 4
    levels: int = 10
    algorithms: list = field(default_factory=lambda: ["randcommuns"])
    measures: list = field(default_factory=lambda: ["modularity", "conductance", "nmi", "omega", "f1a", "f1h"])
    timeout: float = None
    mem_limit_fraction: float = 0.9
    seed: int = 0
    outdir: str = "results"
    webport: int = 0
    topology: str = None
    workers: int = None
    algo_cmds: dict = field(default_factory=dict)


_LIST_KEYS = {"datasets", "algorithms", "measures"}
_CASTS = {"shuffles": int, "levels": int, "timeout": float, "mem_limit_fraction": float,
          "seed": int, "webport": int, "workers": int}


def _split_list(value):
    if isinstance(value, (list, tuple)):
        return [v for item in value for v in _split_list(item)]
    return [v for v in str(value).replace(",", " ").split() if v]


def read_config_file(path):
    """``key = value`` lines; ``algo.<name> = <command template>`` registers an adapter."""
    conf = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip() if not line.lstrip().startswith("algo.") else line.strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = key.strip().replace("-", "_"), value.strip()
            if key.startswith("algo."):
                conf.setdefault("algo_cmds", {})[key[5:]] = value
            else:
                conf[key] = value
    return conf


def make_config(file_conf=None, **flags):
    """Defaults, then the config file, then command line flags."""
    names = {f.name for f in fields(BenchConfig)}
    merged = {}
    for source in (file_conf or {}, {k: v for k, v in flags.items() if v is not None}):
        for key, value in source.items():
            if key not in names:
                raise ConfigError(f"unknown configuration key {key!r}")
            if key == "algo_cmds":
                merged.setdefault("algo_cmds", {}).update(value)
            elif key in _LIST_KEYS:
                merged[key] = _split_list(value)
            elif key in _CASTS:
                try:
                    merged[key] = _CASTS[key](value)
                except (TypeError, ValueError):
                    raise ConfigError(f"bad value {value!r} for {key}") from None
            else:
                merged[key] = value
    cfg = BenchConfig(**merged)
    if cfg.shuffles < 1:
        raise ConfigError("shuffles must be >= 1")
    if cfg.levels < 1:
        raise ConfigError("levels must be >= 1")
    if not 0 < cfg.mem_limit_fraction <= 1:
        raise ConfigError("mem_limit_fraction must lie in (0, 1]")
    return cfg


def derive_seed(seed, *parts):
    h = hashlib.blake2b(repr((int(seed),) + parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def _measure_argv(name, net, cl, truth, out, pad=False):
    argv = [sys.executable, "-m", "clusterbench", "measure", name, "--net", str(net), "--cl", str(cl), "--out", str(out)]
    if truth is not None:
        argv += ["--truth", str(truth)]
        if pad:
            argv.append("--pad-unassigned")
    return argv


@dataclass
class _Dataset:
    path: Path
    nettype: str
    instance: str
    truth: Path = None
    shuffles: list = field(default_factory=list)

    @property
    def dirname(self):
        return netdata.net_dirname(self.nettype, self.instance)


def _resolve_datasets(patterns):
    found = []
    for pat in patterns:
        hits = sorted(glob.glob(pat)) if any(ch in pat for ch in "*?[") else [pat]
        for h in hits:
            p = Path(h).resolve()
            if not p.is_file():
                raise ConfigError(f"dataset {h} does not exist")
            if p.suffix.lower() not in netdata.NETWORK_EXTS:
                raise ConfigError(f"dataset {h}: unsupported extension {p.suffix}")
            nettype, instance = netdata.split_name(p)
            truth = p.with_suffix(".cnl")
            found.append(_Dataset(p, nettype, instance, truth if truth.exists() else None))
    if not found:
        raise ConfigError("no datasets given")
    names = [d.dirname for d in found]
    if len(set(names)) != len(names):
        raise ConfigError("two datasets map to the same nettype^instance")
    return found


def run_benchmark(cfg, registry=None):
    """Run every phase; returns an exit code."""
    from . import measures, results
    from .execpool import ExecPool, Job, JobState, PoolConfig, Task
    from .topology import detect_topology
    from .webmon import serve

    registry = registry or algos.default_registry()
    try:
        for name, template in sorted(cfg.algo_cmds.items()):
            if name not in registry:
                registry.register(algos.command_adapter(name, template))
        adapters = [registry.lookup(a) for a in cfg.algorithms]
        bad = [m for m in cfg.measures if m not in measures.MEASURES]
        if bad:
            raise ConfigError(f"unknown measure {bad[0]!r}")
        datasets = _resolve_datasets(cfg.datasets)
        topo = detect_topology(cfg.topology)
    except (ConfigError, algos.RegistryError, OSError, ValueError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG

    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0

    # shuffles
    for ds in datasets:
        net = netdata.read_nsl(ds.path)
        ds.shuffles = netdata.write_shuffles(net, cfg.shuffles, cfg.seed, out / "data", ds.nettype, ds.instance)

    pool_cfg = PoolConfig(mem_limit_fraction=cfg.mem_limit_fraction, max_workers_override=cfg.workers)
    pool = ExecPool(pool_cfg, workdir=out, topology=topo)
    server = serve(lambda: pool.snapshot_published, cfg.webport) if cfg.webport else None
    try:
        # algorithms
        algo_jobs = []
        for adapter in adapters:
            atask = pool.add_task(Task(adapter.name))
            for ds in datasets:
                ntask = Task(ds.dirname, parent=atask)
                if adapter.needs_truth and ds.truth is None:
                    logger.error("%s needs ground truth, %s has none", adapter.name, ds.path)
                    failures += 1
                    continue
                for k, net_path in enumerate(ds.shuffles):
                    raw = out / "clusters" / f"{adapter.name}-orig" / ds.dirname / str(k)
                    raw.mkdir(parents=True, exist_ok=True)
                    params = {"seed": derive_seed(cfg.seed, adapter.name, ds.dirname, k), "shuffle": k,
                              "truth": str(ds.truth) if ds.truth else ""}
                    job = Job(results.algo_job_name(adapter.name, ds.nettype, ds.instance, k),
                              adapter.argv(net_path.resolve(), raw.resolve(), **params),
                              workdir=str(out), category=adapter.category, timeout=cfg.timeout, task=ntask)
                    pool.submit(job)
                    algo_jobs.append((job, adapter, ds, k, raw))
        pool.run_loop()

        # level unification
        levels = []
        for job, adapter, ds, k, raw in algo_jobs:
            if job.state is not JobState.DONE:
                failures += 1
                continue
            dest = out / "clusters" / adapter.name / ds.dirname / str(k)
            try:
                files = algos.materialize_levels(raw, dest, cfg.levels, adapter.collect)
            except ValueError as exc:
                logger.error("%s: %s", job.name, exc)
                failures += 1
                continue
            levels.extend((adapter, ds, k, lv, f) for lv, f in enumerate(files))

        # evaluation
        eval_jobs = []
        mtask = pool.add_task(Task("measures"))
        for m in cfg.measures:
            info = measures.MEASURES[m]
            sub = Task(m, parent=mtask)
            for adapter, ds, k, lv, f in levels:
                alg = adapter.name
                truth = ds.truth if info.kind == "extrinsic" else None
                if info.kind == "extrinsic" and truth is None:
                    continue
                f = f.resolve()
                res = (out / "evals" / m / alg / ds.dirname / str(k) / f"level_{lv}.csv").resolve()
                res.parent.mkdir(parents=True, exist_ok=True)
                job = Job(f"{m}/{alg}/{ds.dirname}/{k}/{lv}", _measure_argv(m, ds.shuffles[k].resolve(), f, truth, res, adapter.partial_cover),
                          workdir=str(out), category="measure", timeout=cfg.timeout, task=sub)
                pool.submit(job)
                eval_jobs.append((job, results.ResultKey(alg, ds.nettype, ds.instance, k, lv, m), res))
        if eval_jobs:
            pool.run_loop()

        store = results.ResultStore(out / "results")
        collected = []
        for job, key, res in eval_jobs:
            if job.state is not JobState.DONE:
                failures += 1
                continue
            name, value = res.read_text().strip().split(",")
            collected.append((key, float(value)))
        store.record_many(collected)
        store.export_summary(out / "summary.csv", resources=out / "resources.csv")
    finally:
        pool.shutdown()
        if server is not None:
            server.shutdown()
    logger.info("benchmark finished in %s with %d failures", out, failures)
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------- subcommands

def cmd_run(args):
    try:
        file_conf = read_config_file(args.config) if args.config else None
        algo_cmds = {}
        for spec in args.algo_cmd or []:
            name, sep, template = spec.partition("=")
            if not sep or not name:
                raise ConfigError(f"--algo-cmd expects NAME=TEMPLATE, got {spec!r}")
            algo_cmds[name] = template
        cfg = make_config(file_conf, datasets=args.datasets or None, shuffles=args.shuffles, levels=args.levels,
                          algorithms=args.algorithms, measures=args.measures, timeout=args.timeout,
                          mem_limit_fraction=args.mem_limit, seed=args.seed, outdir=args.outdir,
                          webport=args.webport, topology=args.topology, workers=args.workers,
                          algo_cmds=algo_cmds or None)
    except (ConfigError, OSError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return run_benchmark(cfg)


def cmd_gen(args):
    net, truth = netdata.gen_planted_partition(args.nodes, args.clusters, args.pin, args.pout, args.seed)
    name = args.name or f"pp{args.nodes}k{args.clusters}^{args.seed}"
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    netdata.write_nsl(net, outdir / f"{name}.nse")
    netdata.write_cnl(truth, outdir / f"{name}.cnl")
    print(outdir / f"{name}.nse")
    print(outdir / f"{name}.cnl")
    return EXIT_OK


def cmd_shuffle(args):
    net = netdata.read_nsl(args.net)
    nettype, instance = netdata.split_name(args.net)
    for p in netdata.write_shuffles(net, args.count, args.seed, args.outdir, nettype, instance,
                                    ext=Path(args.net).suffix):
        print(p)
    return EXIT_OK


def cmd_measure(args):
    from . import measures
    try:
        cl = netdata.read_cnl(args.cl)
        net = netdata.read_nsl(args.net) if args.net else None
        truth = netdata.read_cnl(args.truth) if args.truth else None
        if args.pad_unassigned and truth is not None:
            cl, added = measures.pad_unassigned(cl, truth.nodes())
            if added:
                logger.warning("%s: padded %d unassigned ground-truth nodes as singletons", args.cl, added)
        res = measures.evaluate(args.name, cl, net=net, truth=truth)
    except (measures.MeasureError, netdata.FormatError, OSError) as exc:
        logger.error("%s: %s", args.name, exc)
        return EXIT_PARTIAL
    row = f"{res.name},{res.value!r}\n"
    if args.out:
        Path(args.out).write_text(row, encoding="utf-8")
    else:
        sys.stdout.write(row)
    return EXIT_OK


def cmd_randcommuns(args):
    net = netdata.read_nsl(args.net)
    truth = netdata.read_cnl(args.truth)
    cl = algos.randcommuns(net, truth, args.seed)
    netdata.write_cnl(cl, args.out)
    return EXIT_OK


def cmd_export(args):
    from . import results
    run = Path(args.run)
    if not (run / "results").is_dir():
        logger.error("%s has no results store", run)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else run / "summary.csv"
    resources = run / "resources.csv"
    paths = results.ResultStore(run / "results").export_summary(out, resources=resources if resources.exists() else None)
    for p in paths:
        if p is not None:
            print(p)
    return EXIT_OK


def cmd_serve(args):
    from .webmon import StateSnapshot, serve
    state = Path(args.run) / "state.json"
    if not state.exists():
        logger.error("%s not found; was the run finished?", state)
        return EXIT_CONFIG
    snapshot = StateSnapshot.load(state)
    server = serve(lambda: snapshot, args.webport, args.host)
    if server is None:
        logger.error("--webport 0 disables the monitor")
        return EXIT_CONFIG
    print(f"serving http://{args.host}:{server.server_address[1]}/jobs", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def cmd_topology(args):
    from .topology import detect_topology, write_topology
    topo = detect_topology(args.topology)
    print(f"# {topo}")
    if args.out:
        write_topology(topo, args.out)
    else:
        for n, c, cpu in topo.triples():
            print(n, c, cpu)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="clusterbench", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the full benchmark")
    r.add_argument("datasets", nargs="*", help="network files or globs (.nse/.nsa/.ncol/.nsl)")
    r.add_argument("--config", help="key = value configuration file; flags win")
    r.add_argument("--shuffles", type=int)
    r.add_argument("--levels", "-L", type=int, dest="levels")
    r.add_argument("--algorithms", help="comma separated algorithm names")
    r.add_argument("--measures", help="comma separated measure names")
    r.add_argument("--algo-cmd", action="append", metavar="NAME=TEMPLATE",
                   help="external algorithm, e.g. 'louvain=/opt/louvain {net} {outdir}'")
    r.add_argument("--timeout", type=float, help="per job timeout, seconds")
    r.add_argument("--mem-limit", type=float, help="fraction of RAM the workers may use")
    r.add_argument("--seed", type=int)
    r.add_argument("--outdir")
    r.add_argument("--webport", type=int, help="web monitor port, 0 disables")
    r.add_argument("--topology", help="manual topology file (numa_id core_id cpu_id per line)")
    r.add_argument("--workers", type=int, help="upper bound on concurrent workers")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="planted partition network and its ground truth")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--clusters", type=int, required=True)
    g.add_argument("--pin", type=float, default=0.5)
    g.add_argument("--pout", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", help="file stem, default pp<nodes>k<clusters>^<seed>")
    g.add_argument("--outdir", default=".")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("shuffle", help="write shuffles 0..count-1 of a network")
    s.add_argument("--net", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--outdir", default=".")
    s.set_defaults(func=cmd_shuffle)

    m = sub.add_parser("measure", help="evaluate one clustering, prints 'measure,value'")
    m.add_argument("name")
    m.add_argument("--net")
    m.add_argument("--cl", required=True)
    m.add_argument("--truth")
    m.add_argument("--out")
    m.add_argument("--pad-unassigned", action="store_true",
                   help="add ground-truth nodes missing from the clustering as singletons (logged)")
    m.set_defaults(func=cmd_measure)

    rc = sub.add_parser("randcommuns", help="random connected clusters shaped like the ground truth")
    rc.add_argument("--net", required=True)
    rc.add_argument("--truth", required=True)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", required=True)
    rc.set_defaults(func=cmd_randcommuns)

    e = sub.add_parser("export", help="rebuild the summary from a run's result store")
    e.add_argument("--run", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)

    sv = sub.add_parser("serve", help="browse a finished run's final state")
    sv.add_argument("--run", required=True)
    sv.add_argument("--webport", type=int, default=8080)
    sv.add_argument("--host", default="127.0.0.1")
    sv.set_defaults(func=cmd_serve)

    t = sub.add_parser("topology", help="print the detected CPU topology")
    t.add_argument("--topology")
    t.add_argument("--out")
    t.set_defaults(func=cmd_topology)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
