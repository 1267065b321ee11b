"""Stochastically clustered solver: split the reduced camera system along a
per-iteration clustering into independent per-cluster solves.

Each physical point gets one virtual copy per cluster that observes it, which
makes the reduced camera matrix cluster-diagonal: cameras in different
clusters never share a virtual point, so no cross block exists. Equality of
the virtual copies' steps is restored approximately: the point step is
computed from the unsplit system (which is exactly the common-step solution),
and for small trust regions (lambda >= 0.1) the right-hand side is first
corrected back towards the constrained steepest-descent direction using the
diagonal approximation of the damped Hessian.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .clustering import (ClusterAssignment, build_camera_graph, cluster_stochastic,
                         single_cluster)
from .errors import SingularVirtualBlock
from .linear import (NormalBlocks, ProblemStructure, apply_diagonal_damping,
                     assemble_normal_blocks, back_substitute, solve_spd_dense)
from .lm import LmStepEngine, SolverConfig, _Timer, trust_region_loop
from .problem import BundleProblem
from .robust import JacobianBlocks
from .trace import IterationRecord, SolveTrace

# below this absolute diagonal value a virtual point block counts as rank
# deficient and its observations are dropped from the split for the iteration
ZERO_DIAG_EPS = 1e-280

CORRECTION_LAMBDA = 0.1


@dataclass
class SplitIndex:
    """Virtual-point enumeration for one clustering.

    Virtual points are ordered by (physical point, cluster id); a point seen
    from k distinct clusters has exactly k copies.
    """

    num_virtual: int
    virt_of_obs: np.ndarray    # (q,)
    virt_point: np.ndarray     # (num_virtual,)
    virt_cluster: np.ndarray   # (num_virtual,)

    @property
    def num_constraints(self) -> int:
        """Constraint row blocks: one per extra copy of a point."""
        return self.num_virtual - int(np.unique(self.virt_point).shape[0])


@dataclass
class ConstraintSet:
    """Rows tying each extra virtual copy to its point's first copy (star)."""

    anchor: np.ndarray   # (r,) virtual index of the point's first copy
    other: np.ndarray    # (r,) virtual index tied to the anchor

    @property
    def count(self) -> int:
        return self.anchor.shape[0]


def split_points(problem: BundleProblem, assignment: ClusterAssignment) -> SplitIndex:
    """Enumerate virtual points: one copy per (point, observing cluster)."""
    l = assignment.num_clusters
    obs_cluster = assignment.cluster_of[problem.cam_idx]
    key = problem.pt_idx * np.int64(l) + obs_cluster
    ukey, inverse = np.unique(key, return_inverse=True)
    return SplitIndex(int(ukey.shape[0]), inverse.astype(np.int64),
                      (ukey // l).astype(np.int64), (ukey % l).astype(np.int64))


def build_constraints(split: SplitIndex) -> ConstraintSet:
    first = np.concatenate(([True], np.diff(split.virt_point) > 0))
    idx = np.arange(split.num_virtual)
    anchor_of = np.maximum.accumulate(np.where(first, idx, 0))
    other = idx[~first]
    return ConstraintSet(anchor_of[~first], other)


@dataclass
class SplitBlocks:
    """Split counterparts C', w' plus shared (B, E, v) of one iteration."""

    nb: NormalBlocks          # unsplit blocks; B, E, v are shared
    Cp: np.ndarray            # (num_virtual, 3, 3), damped
    Cp_inv: np.ndarray        # zero block for dropped virtual points
    wp: np.ndarray            # (num_virtual, 3)
    dropped_virtual: np.ndarray   # (num_virtual,) bool
    n_dropped_obs: int


def assemble_split_blocks(jb: JacobianBlocks, split: SplitIndex, lam: float,
                          structure: ProblemStructure,
                          nb: NormalBlocks | None = None) -> SplitBlocks:
    """Accumulate per-virtual-point blocks; reuses the unsplit B, E, v.

    A virtual point whose pre-damping block has a (near-)zero diagonal entry
    cannot be regularized by multiplicative damping; its observations are
    dropped from the split system for this iteration (inverse block zeroed,
    so it contributes nothing to the cluster systems).
    """
    if nb is None:
        nb = assemble_normal_blocks(jb, structure, lam)
    nv = split.num_virtual
    jp, res = jb.jac_pt, jb.res

    Cp = np.zeros((nv, 3, 3))
    np.add.at(Cp, split.virt_of_obs, np.einsum("qai,qaj->qij", jp, jp))
    wp = np.zeros((nv, 3))
    np.add.at(wp, split.virt_of_obs, -np.einsum("qai,qa->qi", jp, res))

    diag = Cp[:, np.arange(3), np.arange(3)]
    dropped = np.any(diag <= ZERO_DIAG_EPS, axis=1)
    n_dropped_obs = int(np.count_nonzero(dropped[split.virt_of_obs]))

    apply_diagonal_damping(Cp, lam)
    safe = Cp.copy()
    if np.any(dropped):
        safe[dropped] = np.eye(3)
    try:
        np.linalg.cholesky(safe)
    except np.linalg.LinAlgError:
        raise SingularVirtualBlock("virtual point block not positive definite") from None
    Cp_inv = np.linalg.inv(safe)
    if np.any(dropped):
        Cp_inv[dropped] = 0.0
    return SplitBlocks(nb, Cp, Cp_inv, wp, dropped, n_dropped_obs)


def steepest_descent_correction(wp: np.ndarray, sb: SplitBlocks,
                                constraints: ConstraintSet) -> np.ndarray:
    """Restore the constraint term on the gradient: g <- g - A^T nu.

    nu solves (A Hd^-1 A^T) nu = A Hd^-1 g with Hd = diag of the damped split
    Hessian. Constraint rows only touch virtual-point coordinates, so the
    camera half of g is unchanged and the system decouples per physical point
    and per coordinate into (diag + rho 11^T), solved in closed form via
    Sherman-Morrison. Rows touching dropped virtual points are skipped.
    """
    if constraints.count == 0:
        return wp
    keep = ~(sb.dropped_virtual[constraints.anchor]
             | sb.dropped_virtual[constraints.other])
    anchor = constraints.anchor[keep]
    other = constraints.other[keep]
    if anchor.size == 0:
        return wp

    h = sb.Cp[:, np.arange(3), np.arange(3)].copy()   # damped diagonal, (nv, 3)
    h[sb.dropped_virtual] = 1.0                       # unused, avoid 0/0
    q = wp / h

    u = h[other] * (q[anchor] - q[other])
    sigma = np.zeros_like(h)
    np.add.at(sigma, anchor, h[other])
    tau = np.zeros_like(wp)
    np.add.at(tau, anchor, u)
    factor = tau / (h + sigma)                        # rows without constraints unused
    nu = u - factor[anchor] * h[other]

    corrected = wp.copy()
    np.add.at(corrected, anchor, -nu)
    np.add.at(corrected, other, nu)
    return corrected


@dataclass
class SplitSystem:
    """Independent per-cluster camera systems {S'_i dc_i = b_i}."""

    matrices: list[np.ndarray]    # (6 sz_i, 6 sz_i) dense SPD
    rhs: list[np.ndarray]         # (6 sz_i,)
    cam_order: np.ndarray         # cameras grouped by cluster, sorted inside
    starts: np.ndarray            # cluster slices into cam_order

    @property
    def num_clusters(self) -> int:
        return len(self.matrices)


def cluster_schur(sb: SplitBlocks, split: SplitIndex,
                  assignment: ClusterAssignment,
                  structure: ProblemStructure) -> SplitSystem:
    """Schur complement of the split system, assembled per cluster.

    Cross-cluster blocks are structurally absent: an observation pair only
    contributes when both observations map to the same virtual point, which
    implies the same cluster.
    """
    nb = sb.nb
    ci = structure.cam_idx
    m = structure.m
    G = nb.E @ sb.Cp_inv[split.virt_of_obs]

    diag = nb.B.copy()
    np.add.at(diag, ci, -np.einsum("qij,qkj->qik", G, nb.E))
    b = nb.v.copy()
    np.add.at(b, ci, -np.einsum("qij,qj->qi", G, sb.wp[split.virt_of_obs]))

    cof = assignment.cluster_of
    l = assignment.num_clusters
    sizes = np.bincount(cof, minlength=l)
    cam_order = np.lexsort((np.arange(m), cof))
    starts = np.concatenate(([0], np.cumsum(sizes)))
    local_rank = np.empty(m, dtype=np.int64)
    local_rank[cam_order] = np.arange(m) - starts[cof[cam_order]]

    block_offset = np.concatenate(([0], np.cumsum(sizes * sizes)))
    buffer = np.zeros((int(block_offset[-1]), 6, 6))

    diag_slots = block_offset[cof] + local_rank * (sizes[cof] + 1)
    buffer[diag_slots] = diag

    if structure.pair_o1.shape[0]:
        o1, o2 = structure.pair_o1, structure.pair_o2
        intra = split.virt_of_obs[o1] == split.virt_of_obs[o2]
        if np.any(intra):
            o1, o2 = o1[intra], o2[intra]
            c1, c2 = structure.pair_cam1[intra], structure.pair_cam2[intra]
            cl = cof[c1]
            slots = block_offset[cl] + local_rank[c1] * sizes[cl] + local_rank[c2]
            np.add.at(buffer, slots, -np.einsum("pij,pkj->pik", G[o1], nb.E[o2]))

    matrices, rhs = [], []
    for c in range(l):
        sz = int(sizes[c])
        D = buffer[block_offset[c]:block_offset[c + 1]].reshape(sz, sz, 6, 6)
        lower = D.transpose(1, 0, 3, 2).copy()
        ar = np.arange(sz)
        lower[ar, ar] = 0.0     # keep diagonal blocks bit-exact
        full = D + lower
        matrices.append(full.transpose(0, 2, 1, 3).reshape(6 * sz, 6 * sz))
        rhs.append(b[cam_order[starts[c]:starts[c + 1]]].reshape(-1))
    return SplitSystem(matrices, rhs, cam_order, starts)


def solve_clusters(system: SplitSystem, workers: int = 1) -> np.ndarray:
    """Dense Cholesky per cluster; output in global camera order, independent
    of the worker count (each task writes a disjoint slice)."""
    m = system.cam_order.shape[0]
    dc = np.empty((m, 6))

    def solve_one(c: int) -> None:
        sol = solve_spd_dense(system.matrices[c], system.rhs[c])
        cams = system.cam_order[system.starts[c]:system.starts[c + 1]]
        dc[cams] = sol.reshape(-1, 6)

    if workers > 1 and system.num_clusters > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(solve_one, range(system.num_clusters)))
    else:
        for c in range(system.num_clusters):
            solve_one(c)
    return dc.reshape(-1)


def unified_point_update(nb: NormalBlocks, dc: np.ndarray,
                         structure: ProblemStructure) -> np.ndarray:
    """Common step for all virtual copies of a point: the unsplit
    back-substitution dp = C^-1 (w - E^T dc)."""
    return back_substitute(nb, dc, structure)


class StbaStepEngine(LmStepEngine):
    """Step engine drawing a fresh clustering each iteration.

    gamma = inf forces the single-cluster assignment (the solver is then the
    plain LM step); in "fixed" mode the first drawn clustering is reused for
    every subsequent iteration.
    """

    def __init__(self, problem: BundleProblem, config: SolverConfig):
        super().__init__(problem, config)
        self.graph = build_camera_graph(problem)
        self.assignment: ClusterAssignment | None = None
        self.assignments_log: list[ClusterAssignment] = []

    def prepare(self, iteration: int, record: IterationRecord) -> None:
        cfg = self.config
        if np.isinf(cfg.gamma):
            self.assignment = single_cluster(self.problem.num_cameras)
        elif cfg.mode == "fixed" and self.assignment is not None:
            pass
        else:
            rng = np.random.default_rng([cfg.seed, iteration])
            self.assignment = cluster_stochastic(self.graph, cfg.gamma,
                                                 cfg.beta, rng)
        if cfg.log_clusterings:
            self.assignments_log.append(self.assignment)
        record.n_clusters = self.assignment.num_clusters
        record.max_cluster_size = self.assignment.max_size

    def step(self, jb: JacobianBlocks, lam: float, record: IterationRecord
             ) -> tuple[np.ndarray, np.ndarray]:
        timer = _Timer()
        nb = assemble_normal_blocks(jb, self.structure, lam)
        split = split_points(self.problem, self.assignment)
        sb = assemble_split_blocks(jb, split, lam, self.structure, nb)
        constraints = build_constraints(split)
        record.n_constraints = constraints.count
        record.n_dropped_split = sb.n_dropped_obs
        record.t_assembly_ms += timer.lap_ms()

        wp = sb.wp
        if lam >= CORRECTION_LAMBDA and constraints.count:
            wp = steepest_descent_correction(sb.wp, sb, constraints)
            record.correction_applied = True
        record.t_correction_ms += timer.lap_ms()

        sb_solve = replace(sb, wp=wp)
        system = cluster_schur(sb_solve, split, self.assignment, self.structure)
        record.t_assembly_ms += timer.lap_ms()
        dc = solve_clusters(system, self.config.workers)
        record.t_rcs_ms += timer.lap_ms()
        dp = unified_point_update(nb, dc, self.structure)
        record.t_backsub_ms += timer.lap_ms()
        return dc, dp


def stba_minimize(problem: BundleProblem, config: SolverConfig | None = None
                  ) -> tuple[np.ndarray, SolveTrace]:
    """Minimize with per-iteration stochastic clustering of the RCS."""
    config = replace(config) if config else SolverConfig(solver="stba")
    if not config.solver.startswith("stba"):
        config = replace(config, solver="stba")
    if config.solver == "stba-fixed":
        config = replace(config, mode="fixed")
    engine = StbaStepEngine(problem, config)
    x, trace = trust_region_loop(problem, config, engine)
    trace.clusterings = engine.assignments_log
    return x, trace


def minimize(problem: BundleProblem, config: SolverConfig
             ) -> tuple[np.ndarray, SolveTrace]:
    """Dispatch on config.solver (lm-dense, lm-pcg, stba, stba-fixed)."""
    from .lm import lm_minimize
    if config.solver.startswith("stba"):
        return stba_minimize(problem, config)
    return lm_minimize(problem, config)
