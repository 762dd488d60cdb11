"""CPU topology model and isolation policies.

The topology is a three level hierarchy: NUMA nodes hold physical cores,
cores hold logical CPUs (hardware threads). It is read from Linux sysfs,
from a manual description file, or built flat as a fallback.

Manual file format, one logical CPU per line::

    # numa_id core_id cpu_id
    0 0 0
    0 0 1
"""
import enum
import logging
import os
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

SYSFS_CPU = Path("/sys/devices/system/cpu")
SYSFS_NODE = Path("/sys/devices/system/node")


class AffinityPolicy(enum.Enum):
    PHYS_CORE = "PhysCore"
    LOGICAL_CPU = "LogicalCpu"
    NUMA_NODE = "NumaNode"

    @classmethod
    def parse(cls, text):
        for p in cls:
            if text.lower() in (p.value.lower(), p.name.lower()):
                return p
        raise ValueError(f"unknown affinity policy {text!r}")


@dataclass(frozen=True)
class PhysCore:
    id: int
    cpus: tuple


@dataclass(frozen=True)
class NumaNode:
    id: int
    cores: tuple


@dataclass(frozen=True)
class TopologyMap:
    nodes: tuple

    def __post_init__(self):
        if not self.nodes or not all(n.cores for n in self.nodes) \
                or not all(c.cpus for n in self.nodes for c in n.cores):
            raise ValueError("topology needs at least one node, core and CPU, with no empty level")
        cpus = [cpu for n in self.nodes for c in n.cores for cpu in c.cpus]
        if len(cpus) != len(set(cpus)):
            raise ValueError("a logical CPU appears in more than one core")
        cores = [(n.id, c.id) for n in self.nodes for c in n.cores]
        if len(cores) != len(set(cores)):
            raise ValueError("a core id appears twice within one NUMA node")
        if len({n.id for n in self.nodes}) != len(self.nodes):
            raise ValueError("duplicate NUMA node id")

    @classmethod
    def from_triples(cls, triples):
        """Build from ``(numa_id, core_id, cpu_id)`` rows."""
        tree = {}
        for numa, core, cpu in triples:
            tree.setdefault(int(numa), {}).setdefault(int(core), []).append(int(cpu))
        return cls(tuple(
            NumaNode(nid, tuple(PhysCore(cid, tuple(sorted(cpus))) for cid, cpus in sorted(cores.items())))
            for nid, cores in sorted(tree.items())))

    @classmethod
    def flat(cls, n_cpus):
        return cls.from_triples((0, i, i) for i in range(n_cpus))

    def triples(self):
        return [(n.id, c.id, cpu) for n in self.nodes for c in n.cores for cpu in c.cpus]

    @property
    def cores(self):
        return [c for n in self.nodes for c in n.cores]

    @property
    def cpus(self):
        return [cpu for c in self.cores for cpu in c.cpus]

    def __str__(self):
        return f"{len(self.nodes)} NUMA nodes, {len(self.cores)} cores, {len(self.cpus)} logical CPUs"


def slots_for(policy, topo):
    """One CPU set per unit of the policy, in topology order."""
    policy = AffinityPolicy(policy) if not isinstance(policy, AffinityPolicy) else policy
    if policy is AffinityPolicy.PHYS_CORE:
        return [frozenset(c.cpus) for c in topo.cores]
    if policy is AffinityPolicy.LOGICAL_CPU:
        return [frozenset((cpu,)) for cpu in topo.cpus]
    return [frozenset(cpu for c in n.cores for cpu in c.cpus) for n in topo.nodes]


# ------------------------------------------------------------------- file I/O

def read_topology(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3 or not all(p.lstrip("-").isdigit() for p in parts):
                raise ValueError(f"{path}:{lineno}: expected 'numa_id core_id cpu_id'")
            rows.append(tuple(int(p) for p in parts))
    return TopologyMap.from_triples(rows)


def write_topology(topo, path):
    lines = ["# numa_id core_id cpu_id"] + [f"{n} {c} {cpu}" for n, c, cpu in topo.triples()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ detection

def _parse_cpulist(text):
    cpus = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _online_cpus():
    if hasattr(os, "sched_getaffinity"):
        return sorted(os.sched_getaffinity(0))
    return list(range(os.cpu_count() or 1))


def _detect_sysfs(cpu_root=SYSFS_CPU, node_root=SYSFS_NODE):
    online = set(_online_cpus())
    numa_of = {}
    for nd in sorted(node_root.glob("node[0-9]*")):
        nid = int(nd.name[4:])
        for cpu in _parse_cpulist((nd / "cpulist").read_text()):
            numa_of[cpu] = nid
    rows = []
    core_ids = {}
    for cpu in sorted(online):
        topo_dir = cpu_root / f"cpu{cpu}" / "topology"
        pkg = int((topo_dir / "physical_package_id").read_text())
        core = int((topo_dir / "core_id").read_text())
        # cores are renumbered per NUMA node so that ids stay unique within it
        numa = numa_of.get(cpu, 0)
        key = (numa, pkg, core)
        core_ids.setdefault(key, len([k for k in core_ids if k[0] == numa]))
        rows.append((numa, core_ids[key], cpu))
    if not rows:
        raise OSError("no online CPUs visible in sysfs")
    return TopologyMap.from_triples(rows)


def detect_topology(path=None):
    """Topology from ``path`` if given, else sysfs, else a flat map of the online CPUs."""
    if path is not None:
        return read_topology(path)
    try:
        return _detect_sysfs()
    except (OSError, ValueError) as exc:
        cpus = _online_cpus()
        logger.warning("topology introspection failed (%s); using a flat map of %d CPUs", exc, len(cpus))
        return TopologyMap.from_triples((0, i, cpu) for i, cpu in enumerate(cpus))
