"""Slow, direct reference implementations used only by the tests."""
from itertools import combinations


def partition_from_labels(labels):
    groups = {}
    for node, lab in enumerate(labels):
        groups.setdefault(lab, []).append(str(node))
    return list(groups.values())


def ari_pairs(labels_a, labels_b):
    """Adjusted Rand index from the four pair counts; None when undefined."""
    a = b = c = d = 0
    for i, j in combinations(range(len(labels_a)), 2):
        same_a = labels_a[i] == labels_a[j]
        same_b = labels_b[i] == labels_b[j]
        if same_a and same_b:
            a += 1
        elif same_a:
            b += 1
        elif same_b:
            c += 1
        else:
            d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return None
    return 2.0 * (a * d - b * c) / denom


def modularity_pairs(edges, nodes, labels):
    """Q = 1/2m sum_ij (A_ij - k_i k_j / 2m) [c_i == c_j], summed over ordered node pairs."""
    adj = {}
    deg = {v: 0.0 for v in nodes}
    m = 0.0
    for s, d, w in edges:
        adj[(s, d)] = adj.get((s, d), 0.0) + w
        adj[(d, s)] = adj.get((d, s), 0.0) + w
        deg[s] += w
        deg[d] += w
        m += w
    q = 0.0
    for i in nodes:
        for j in nodes:
            if labels[i] == labels[j]:
                q += adj.get((i, j), 0.0) - deg[i] * deg[j] / (2 * m)
    return q / (2 * m)


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1:]
        yield [[first]] + part
