"""Covisibility camera graph and modularity-guided stochastic clustering.

The camera graph weights each edge by the number of points the two cameras
both observe. Clustering starts from singletons and repeatedly merges an
adjacent cluster pair, sampled from a softmax over modularity increments
(scale beta), subject to the size cap gamma. Merging stops when no candidate
with a positive increment remains. The modularity is evaluated over the
stored edge list:

    Q = (1/2s) * sum over edges e_ij with same cluster of (w_ij - k_i k_j / 2s)

so pairs without an edge contribute nothing, and all singletons give Q = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linear import observation_pairs


@dataclass
class CameraGraph:
    """Undirected weighted covisibility graph over cameras."""

    num_nodes: int
    edge_i: np.ndarray     # (e,), i < j
    edge_j: np.ndarray
    weights: np.ndarray    # (e,), covisible point counts
    degrees: np.ndarray    # (num_nodes,), k_i = sum of incident weights
    total_weight: float    # s = sum of edge weights

    @property
    def num_edges(self) -> int:
        return self.edge_i.shape[0]


@dataclass
class ClusterAssignment:
    """Partition of the cameras into dense cluster ids [0, l)."""

    cluster_of: np.ndarray   # (m,)
    num_clusters: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.num_clusters)

    @property
    def max_size(self) -> int:
        return int(self.sizes.max())

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.cluster_of, kind="stable")
        bounds = np.searchsorted(self.cluster_of[order],
                                 np.arange(self.num_clusters + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.num_clusters)]


def single_cluster(num_cameras: int) -> ClusterAssignment:
    return ClusterAssignment(np.zeros(num_cameras, dtype=np.int64), 1)


def build_camera_graph(problem) -> CameraGraph:
    """Edge (i, j) with weight = number of points observed by both cameras."""
    m = problem.num_cameras
    o1, o2 = observation_pairs(problem.pt_idx)
    c1, c2 = problem.cam_idx[o1], problem.cam_idx[o2]
    key = c1 * np.int64(m) + c2
    ukey, counts = np.unique(key, return_counts=True)
    edge_i = (ukey // m).astype(np.int64)
    edge_j = (ukey % m).astype(np.int64)
    weights = counts.astype(np.float64)
    degrees = np.zeros(m)
    np.add.at(degrees, edge_i, weights)
    np.add.at(degrees, edge_j, weights)
    return CameraGraph(m, edge_i, edge_j, weights, degrees, float(weights.sum()))


def _cluster_of(assignment) -> np.ndarray:
    if isinstance(assignment, ClusterAssignment):
        return assignment.cluster_of
    return np.asarray(assignment)


def modularity(graph: CameraGraph, assignment) -> float:
    """Q of a partition, summed over the stored edge list."""
    if graph.num_edges == 0:
        return 0.0
    cof = _cluster_of(assignment)
    s2 = 2.0 * graph.total_weight
    same = cof[graph.edge_i] == cof[graph.edge_j]
    ki = graph.degrees[graph.edge_i]
    kj = graph.degrees[graph.edge_j]
    return float(np.sum((graph.weights - ki * kj / s2)[same]) / s2)


def delta_modularity(graph: CameraGraph, assignment, cluster_x: int,
                     cluster_y: int) -> float:
    """Q(after merging x and y) - Q(before); x != y."""
    if cluster_x == cluster_y:
        raise ValueError("clusters must differ")
    if graph.num_edges == 0:
        return 0.0
    cof = _cluster_of(assignment)
    a = cof[graph.edge_i]
    b = cof[graph.edge_j]
    between = ((a == cluster_x) & (b == cluster_y)) | ((a == cluster_y) & (b == cluster_x))
    s2 = 2.0 * graph.total_weight
    ki = graph.degrees[graph.edge_i]
    kj = graph.degrees[graph.edge_j]
    return float(np.sum((graph.weights - ki * kj / s2)[between]) / s2)


def _softmax_pick(dq: np.ndarray, beta: float, rng: np.random.Generator) -> int:
    """Sample an index proportionally to exp(beta * dq), stabilized."""
    logits = beta * dq
    p = np.exp(logits - logits.max())
    c = np.cumsum(p)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def sample_merge(candidates, beta: float, rng: np.random.Generator):
    """Pick one (x, y, dq) candidate from the softmax over beta * dq."""
    if len(candidates) == 0:
        raise ValueError("no merge candidates")
    if not beta > 0:
        raise ValueError("beta must be positive")
    dq = np.array([c[2] for c in candidates], dtype=np.float64)
    return candidates[_softmax_pick(dq, beta, rng)]


class _MergeState:
    """Incremental bookkeeping for bottom-up cluster merging.

    Candidate rows hold, per adjacent cluster pair, the summed cross-edge
    weight W and the summed degree product K over cross edges, giving
    dq = (W - K / 2s) / 2s, always equal to the full recomputation.
    """

    def __init__(self, graph: CameraGraph):
        m = graph.num_nodes
        e = graph.num_edges
        self.s2 = 2.0 * graph.total_weight if graph.total_weight > 0 else 1.0
        self.ex = graph.edge_i.astype(np.int64).copy()
        self.ey = graph.edge_j.astype(np.int64).copy()
        self.W = graph.weights.astype(np.float64).copy()
        self.K = graph.degrees[graph.edge_i] * graph.degrees[graph.edge_j]
        self.alive = np.ones(e, dtype=bool)
        self.sizes = np.ones(m, dtype=np.int64)
        self.parent = np.arange(m)
        self.row_of = {(int(a), int(b)): r for r, (a, b) in
                       enumerate(zip(self.ex, self.ey))}
        self.adj = [set() for _ in range(m)]
        for a, b in zip(self.ex, self.ey):
            self.adj[int(a)].add(int(b))
            self.adj[int(b)].add(int(a))

    def candidates(self, gamma) -> np.ndarray:
        """Row indices of live pairs whose merged size respects gamma."""
        ok = self.alive & (self.sizes[self.ex] + self.sizes[self.ey] <= gamma)
        return np.flatnonzero(ok)

    def dq(self, rows: np.ndarray) -> np.ndarray:
        return (self.W[rows] - self.K[rows] / self.s2) / self.s2

    def merge(self, x: int, y: int) -> None:
        keep, drop = (x, y) if x < y else (y, x)
        key = (keep, drop)
        row = self.row_of.pop(key)
        self.alive[row] = False
        self.adj[keep].discard(drop)
        self.adj[drop].discard(keep)
        for u in sorted(self.adj[drop]):
            old = (drop, u) if drop < u else (u, drop)
            r = self.row_of.pop(old)
            self.adj[u].discard(drop)
            new = (keep, u) if keep < u else (u, keep)
            if new in self.row_of:
                r2 = self.row_of[new]
                self.W[r2] += self.W[r]
                self.K[r2] += self.K[r]
                self.alive[r] = False
            else:
                self.row_of[new] = r
                self.ex[r], self.ey[r] = new
                self.adj[keep].add(u)
                self.adj[u].add(keep)
        self.adj[drop].clear()
        self.sizes[keep] += self.sizes[drop]
        self.parent[drop] = keep

    def finalize(self) -> ClusterAssignment:
        parent = self.parent
        # path-compress; merging always keeps the smaller id so the
        # representative is the minimum camera index of the cluster
        for i in range(len(parent)):
            root = i
            while parent[root] != root:
                root = parent[root]
            j = i
            while parent[j] != root:
                parent[j], j = root, parent[j]
        reps, dense = np.unique(parent, return_inverse=True)
        return ClusterAssignment(dense.astype(np.int64), int(reps.shape[0]))


def cluster_stochastic(graph: CameraGraph, gamma, beta: float,
                       rng: np.random.Generator) -> ClusterAssignment:
    """Randomized bottom-up merging, softmax over positive dq candidates."""
    if not gamma >= 1:
        raise ValueError("gamma must be >= 1")
    if not beta > 0:
        raise ValueError("beta must be positive")
    state = _MergeState(graph)
    while True:
        rows = state.candidates(gamma)
        if rows.size == 0:
            break
        dq = state.dq(rows)
        pos = dq > 0
        if not np.any(pos):
            break
        rows = rows[pos]
        pick = rows[_softmax_pick(dq[pos], beta, rng)]
        state.merge(int(state.ex[pick]), int(state.ey[pick]))
    return state.finalize()


def cluster_deterministic(graph: CameraGraph, gamma) -> ClusterAssignment:
    """Greedy variant: always merge the max-dq candidate, ties by pair id."""
    if not gamma >= 1:
        raise ValueError("gamma must be >= 1")
    state = _MergeState(graph)
    while True:
        rows = state.candidates(gamma)
        if rows.size == 0:
            break
        dq = state.dq(rows)
        best = dq.max()
        if not best > 0:
            break
        tied = rows[dq == best]
        order = np.lexsort((state.ey[tied], state.ex[tied]))
        pick = tied[order[0]]
        state.merge(int(state.ex[pick]), int(state.ey[pick]))
    return state.finalize()


def write_assignment_csv(path, assignment: ClusterAssignment) -> None:
    lines = ["camera_index,cluster_id"]
    lines += [f"{i},{int(c)}" for i, c in enumerate(assignment.cluster_of)]
    Path(path).write_text("\n".join(lines) + "\n")
