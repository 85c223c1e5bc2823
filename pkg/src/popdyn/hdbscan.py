"""Density-based clustering on a precomputed distance matrix.

The classic pipeline, built from scratch: core distances, mutual
reachability, minimum spanning tree, single-linkage hierarchy condensed by
erosion of under-sized splits, stability-based flat extraction, and an
iterative driver that re-clusters the noise until it is small enough.

NOISE is labeled -1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .metrics import DistanceMatrix

NOISE = -1


@dataclass(frozen=True)
class ClusterConfig:
    min_samples: int = 2
    min_cluster_size: int = 2

    def __post_init__(self):
        if self.min_samples < 1:
            raise ValidationError("min_samples must be a positive integer")
        if self.min_cluster_size < 2:
            raise ValidationError("min_cluster_size must be >= 2")


@dataclass(frozen=True)
class MstEdge:
    u: int
    v: int
    weight: float

    def __post_init__(self):
        if self.u == self.v:
            raise ValidationError("MST edge endpoints must differ")


@dataclass(frozen=True)
class CondensedTree:
    """Single-linkage hierarchy after erosion of under-sized splits.

    Row k says: ``child[k]`` departs cluster ``parent[k]`` at density level
    ``lam[k]`` (= 1/distance). Children with id < n_points are single points
    (child_size 1); ids >= n_points are clusters. The root cluster has id
    ``n_points``.
    """

    n_points: int
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    child_size: np.ndarray

    @property
    def root(self) -> int:
        return self.n_points

    def cluster_ids(self) -> list[int]:
        ids = {self.root} | {c for c in self.child.tolist() if c >= self.n_points}
        return sorted(ids)

    def cluster_children(self, cluster: int) -> list[int]:
        mask = (self.parent == cluster) & (self.child >= self.n_points)
        return [int(c) for c in self.child[mask]]

    def birth_lambda(self, cluster: int) -> float:
        if cluster == self.root:
            return 0.0
        rows = np.flatnonzero(self.child == cluster)
        if len(rows) != 1:
            raise ValidationError(f"cluster {cluster} must be created by exactly one split")
        return float(self.lam[rows[0]])

    def stability(self, cluster: int) -> float:
        """Sum of child_size * (lambda - birth_lambda) over departures."""
        birth = self.birth_lambda(cluster)
        mask = self.parent == cluster
        return float(np.sum(self.child_size[mask] * (self.lam[mask] - birth)))

    def point_memberships(self) -> np.ndarray:
        """For each point, the cluster it departs from (its direct parent)."""
        out = np.full(self.n_points, -1, dtype=int)
        mask = self.child < self.n_points
        out[self.child[mask]] = self.parent[mask]
        if np.any(out < 0):
            raise ValidationError("every point must appear exactly once as a leaf departure")
        return out

    def point_lambdas(self) -> np.ndarray:
        out = np.zeros(self.n_points)
        mask = self.child < self.n_points
        out[self.child[mask]] = self.lam[mask]
        return out


@dataclass(frozen=True)
class ClusterLabeling:
    """Flat clustering: per-point label/round plus per-cluster statistics."""

    labels: np.ndarray
    rounds: np.ndarray
    cluster_sizes: dict[int, int]
    cluster_stability: dict[int, float]
    cluster_rounds: dict[int, int]
    converged: bool = True
    n_rounds: int = 1

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def noise_rate(self) -> float:
        return float(np.mean(self.labels == NOISE))

    def noise_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)


def _matrix_values(D) -> np.ndarray:
    values = D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValidationError("distance matrix must be square")
    return values


def core_distances(D, min_samples: int) -> np.ndarray:
    """Distance from each point to its min_samples-th nearest OTHER point.

    The point itself is excluded, which sits one neighbor off from
    implementations that count the query point among its own neighbors.
    """
    values = _matrix_values(D)
    n = values.shape[0]
    if min_samples >= n:
        raise ValidationError(f"min_samples={min_samples} needs at least {min_samples + 1} points")
    cores = np.empty(n)
    for i in range(n):
        others = np.delete(values[i], i)
        cores[i] = np.partition(others, min_samples - 1)[min_samples - 1]
    return cores


def mutual_reachability(D, cores: np.ndarray) -> np.ndarray:
    """max(core_i, core_j, d(i,j)) with zero diagonal."""
    values = _matrix_values(D)
    reach = np.maximum(values, np.maximum.outer(cores, cores))
    np.fill_diagonal(reach, 0.0)
    return reach


def build_mst(M) -> list[MstEdge]:
    """Prim's algorithm on the dense matrix; ties broken by lowest index.

    Returns the n-1 edges sorted by (weight, u, v).
    """
    values = _matrix_values(M)
    n = values.shape[0]
    if n < 2:
        return []
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    key = values[0].copy()
    attach = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        candidates = np.flatnonzero(~visited)
        j = candidates[np.argmin(key[candidates])]  # argmin keeps the lowest index on ties
        u, v = int(attach[j]), int(j)
        edges.append(MstEdge(u=min(u, v), v=max(u, v), weight=float(key[j])))
        visited[j] = True
        better = ~visited & (values[j] < key)
        key[better] = values[j][better]
        attach[better] = j
        tie_lower = ~visited & (values[j] == key) & (j < attach)
        attach[tie_lower] = j
    edges.sort(key=lambda e: (e.weight, e.u, e.v))
    return edges


def _single_linkage(edges: list[MstEdge], n: int):
    """Merge MST edges in weight order; returns per-merge (left, right, dist).

    Internal node k (0-based) has id n + k and merges the current components
    of its edge endpoints.
    """
    parent = list(range(2 * n - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    merges = []
    nxt = n
    for e in sorted(edges, key=lambda e: (e.weight, e.u, e.v)):
        ra, rb = find(e.u), find(e.v)
        merges.append((ra, rb, e.weight))
        parent[ra] = parent[rb] = nxt
        nxt += 1
    return merges


def condense(edges: list[MstEdge], n: int, min_cluster_size: int, zero_lambda: float | None = None) -> CondensedTree:
    """Reinterpret the single-linkage hierarchy with cluster erosion.

    Walking the merge tree top-down, a split whose smaller side has fewer
    than ``min_cluster_size`` points erodes those points out of the parent
    cluster; splits with two large sides create two child clusters. Lambda
    is 1/distance; zero-distance merges use the finite ``zero_lambda`` cap
    (default: 1000 / smallest positive edge weight).
    """
    if n < 2:
        raise ValidationError("condensing needs at least 2 points")
    if min_cluster_size < 2:
        raise ValidationError("min_cluster_size must be >= 2")
    if len(edges) != n - 1:
        raise ValidationError("a spanning tree over n points has n-1 edges")
    if zero_lambda is None:
        positive = [e.weight for e in edges if e.weight > 0]
        zero_lambda = 1e3 / min(positive) if positive else 1e3

    merges = _single_linkage(edges, n)
    children: dict[int, tuple[int, int, float]] = {}
    sizes = np.ones(2 * n - 1, dtype=int)
    for k, (left, right, dist) in enumerate(merges):
        node = n + k
        children[node] = (left, right, dist)
        sizes[node] = sizes[left] + sizes[right]

    def leaves(node: int):
        stack, out = [node], []
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                l, r, _ = children[cur]
                stack.extend((r, l))
        return out

    rows_parent, rows_child, rows_lam, rows_size = [], [], [], []

    def emit(parent, child, lam, size):
        rows_parent.append(parent)
        rows_child.append(child)
        rows_lam.append(lam)
        rows_size.append(size)

    root_sl = 2 * n - 2
    next_cluster = n + 1  # root cluster takes id n
    stack = [(root_sl, n)]
    while stack:
        sl_node, cluster = stack.pop()
        left, right, dist = children[sl_node]
        lam = (1.0 / dist) if dist > 0 else zero_lambda
        big_l, big_r = sizes[left] >= min_cluster_size, sizes[right] >= min_cluster_size
        if big_l and big_r:
            for side in (left, right):
                cid = next_cluster
                next_cluster += 1
                emit(cluster, cid, lam, int(sizes[side]))
                if side < n:
                    raise ValidationError("a cluster child cannot be a single point")
                stack.append((side, cid))
        elif big_l or big_r:
            big, small = (left, right) if big_l else (right, left)
            for p in sorted(leaves(small)):
                emit(cluster, p, lam, 1)
            stack.append((big, cluster))
        else:
            for p in sorted(leaves(sl_node)):
                emit(cluster, p, lam, 1)

    return CondensedTree(
        n_points=n,
        parent=np.array(rows_parent, dtype=int),
        child=np.array(rows_child, dtype=int),
        lam=np.array(rows_lam, dtype=float),
        child_size=np.array(rows_size, dtype=int),
    )


def _select_clusters(tree: CondensedTree) -> tuple[set[int], dict[int, float]]:
    """Excess-of-mass selection: maximize summed stability over an antichain.

    Bottom-up over the condensed clusters: a parent is kept only when its own
    stability strictly exceeds the best total achievable by its descendants.
    """
    ids = tree.cluster_ids()
    stability = {c: tree.stability(c) for c in ids}
    best: dict[int, float] = {}
    chosen: dict[int, set[int]] = {}
    for c in sorted(ids, reverse=True):  # children always carry higher ids
        kids = tree.cluster_children(c)
        subtree = sum(best[k] for k in kids)
        if kids and subtree >= stability[c]:
            best[c] = subtree
            chosen[c] = set().union(*(chosen[k] for k in kids))
        else:
            best[c] = stability[c]
            chosen[c] = {c}
    return chosen[tree.root], stability


def extract_flat(tree: CondensedTree) -> ClusterLabeling:
    """Flat clustering from the condensed tree.

    Points belong to their nearest selected ancestor; anything not covered
    is NOISE. When the selection is the root itself (the whole dataset as
    one cluster), membership additionally requires a point to persist to the
    root's final density level, so early-eroding outliers stay noise.
    """
    selected, stability = _select_clusters(tree)
    memberships = tree.point_memberships()
    point_lams = tree.point_lambdas()

    parent_of: dict[int, int] = {}
    for c in tree.cluster_ids():
        for k in tree.cluster_children(c):
            parent_of[k] = c

    label_map = {c: i for i, c in enumerate(sorted(selected))}
    n = tree.n_points
    labels = np.full(n, NOISE, dtype=int)
    root_only = selected == {tree.root}
    if root_only:
        threshold = float(np.max(tree.lam[tree.parent == tree.root]))
    for p in range(n):
        c = memberships[p]
        while c not in selected and c in parent_of:
            c = parent_of[c]
        if c in selected:
            if root_only and point_lams[p] < threshold:
                continue
            labels[p] = label_map[c]

    sizes = {label_map[c]: int(np.sum(labels == label_map[c])) for c in selected}
    stabilities = {label_map[c]: stability[c] for c in selected}
    empty = {lbl for lbl, s in sizes.items() if s == 0}
    if empty:  # a selected root whose points all eroded early
        labels_kept = sorted(set(sizes) - empty)
        remap = {old: new for new, old in enumerate(labels_kept)}
        labels = np.array([remap.get(l, NOISE) if l != NOISE else NOISE for l in labels])
        sizes = {remap[l]: sizes[l] for l in labels_kept}
        stabilities = {remap[l]: stabilities[l] for l in labels_kept}
    rounds = np.where(labels != NOISE, 0, -1)
    return ClusterLabeling(
        labels=labels,
        rounds=rounds,
        cluster_sizes=sizes,
        cluster_stability=stabilities,
        cluster_rounds={lbl: 0 for lbl in sizes},
    )


def cluster(D, cfg: ClusterConfig = ClusterConfig()) -> ClusterLabeling:
    """One full HDBSCAN pass on a distance matrix.

    min_samples is clamped to n-1 on small inputs so that any corpus of at
    least min_cluster_size points can be clustered.
    """
    values = _matrix_values(D)
    n = values.shape[0]
    if n < cfg.min_cluster_size:
        raise ValidationError(f"need at least min_cluster_size={cfg.min_cluster_size} points")
    cores = core_distances(values, min(cfg.min_samples, n - 1))
    reach = mutual_reachability(values, cores)
    edges = build_mst(reach)
    positive = values[values > 0]
    zero_lambda = 1e3 / float(positive.min()) if positive.size else 1e3
    tree = condense(edges, n, cfg.min_cluster_size, zero_lambda=zero_lambda)
    return extract_flat(tree)


def iterative_cluster(
    D,
    cfg: ClusterConfig = ClusterConfig(),
    noise_threshold: float = 0.05,
    max_rounds: int = 20,
) -> ClusterLabeling:
    """Re-cluster the noise as a dataset of its own until it is small.

    Each round runs a fresh HDBSCAN pass on the sub-matrix of the current
    noise (density is redefined there since the population shrank); new
    clusters are tagged with the round that produced them. Stops when noise
    drops to ``noise_threshold`` of the full dataset, when a round yields no
    new cluster, or at ``max_rounds``; assignments from earlier rounds are
    never revisited.
    """
    if not (0 < noise_threshold < 1):
        raise ValidationError("noise_threshold must lie in (0, 1)")
    values = _matrix_values(D)
    n = values.shape[0]
    result = cluster(values, cfg)
    labels = result.labels.copy()
    rounds = result.rounds.copy()
    sizes = dict(result.cluster_sizes)
    stabilities = dict(result.cluster_stability)
    cluster_rounds = dict(result.cluster_rounds)
    next_label = max(sizes, default=-1) + 1
    rounds_run = 1

    while True:
        noise_idx = np.flatnonzero(labels == NOISE)
        if len(noise_idx) <= noise_threshold * n:
            return ClusterLabeling(labels, rounds, sizes, stabilities, cluster_rounds,
                                   converged=True, n_rounds=rounds_run)
        if rounds_run >= max_rounds:
            break
        if len(noise_idx) < cfg.min_cluster_size:
            break
        sub = values[np.ix_(noise_idx, noise_idx)]
        sub_result = cluster(sub, cfg)
        if sub_result.n_clusters == 0:
            break
        r = rounds_run
        for sub_label in sorted(sub_result.cluster_sizes):
            members = noise_idx[sub_result.labels == sub_label]
            labels[members] = next_label
            rounds[members] = r
            sizes[next_label] = len(members)
            stabilities[next_label] = sub_result.cluster_stability[sub_label]
            cluster_rounds[next_label] = r
            next_label += 1
        rounds_run += 1

    noise_left = int(np.sum(labels == NOISE))
    return ClusterLabeling(labels, rounds, sizes, stabilities, cluster_rounds,
                           converged=noise_left <= noise_threshold * n, n_rounds=rounds_run)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-adjusted agreement between two labelings of the same points."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValidationError("labelings must cover the same points")
    n = len(a)
    if n < 2:
        return 1.0
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
