"""Block normal equations, Schur complement and reduced-camera-system solvers.

The damped normal equations (camera blocks B, point blocks C, coupling blocks
E, gradients v, w) are stored block-wise: one 6x6 block per camera, one 3x3
block per point, one 6x3 block per observation (each (camera, point) pair has
at most one observation). The reduced camera matrix S = B - E C^-1 E^T keeps
the covisibility block sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefinite, PcgStalled, SingularPointBlock
from .robust import JacobianBlocks


def observation_pairs(pt_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (o1, o2), o1 < o2, of observations of the same point.

    Requires observations sorted by (point, camera); pairs then satisfy
    cam[o1] < cam[o2]. Enumeration order is by point, then lexicographic in
    the local pair indices, which makes downstream accumulation deterministic.
    """
    n_obs = pt_idx.shape[0]
    boundaries = np.flatnonzero(np.diff(pt_idx)) + 1
    starts = np.concatenate(([0], boundaries))
    counts = np.diff(np.concatenate((starts, [n_obs])))

    chunks_o1, chunks_o2 = [], []
    order = np.argsort(counts, kind="stable")
    sorted_counts = counts[order]
    # group points by identical observation count so each group vectorizes
    group_bounds = np.flatnonzero(np.diff(sorted_counts)) + 1
    group_starts = np.concatenate(([0], group_bounds))
    group_ends = np.concatenate((group_bounds, [len(order)]))
    for gs, ge in zip(group_starts, group_ends):
        c = int(sorted_counts[gs])
        if c < 2:
            continue
        base = starts[order[gs:ge]]
        a, b = np.triu_indices(c, k=1)
        chunks_o1.append((base[:, None] + a[None, :]).ravel())
        chunks_o2.append((base[:, None] + b[None, :]).ravel())
    if not chunks_o1:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    o1 = np.concatenate(chunks_o1)
    o2 = np.concatenate(chunks_o2)
    # restore global (point-major) enumeration order
    perm = np.lexsort((o2, o1))
    return o1[perm], o2[perm]


@dataclass
class ProblemStructure:
    """Static index arrays shared by every iteration of a solve."""

    m: int
    n: int
    cam_idx: np.ndarray
    pt_idx: np.ndarray
    pair_o1: np.ndarray       # observation pairs within a point
    pair_o2: np.ndarray
    pair_cam1: np.ndarray     # camera pair (i < k) of each observation pair
    pair_cam2: np.ndarray
    pair_slot: np.ndarray     # -> row in the unique covisible camera-pair list
    upair_cam1: np.ndarray    # unique covisible camera pairs, i < k
    upair_cam2: np.ndarray

    @classmethod
    def build(cls, problem) -> "ProblemStructure":
        m, n = problem.num_cameras, problem.num_points
        o1, o2 = observation_pairs(problem.pt_idx)
        c1 = problem.cam_idx[o1]
        c2 = problem.cam_idx[o2]
        key = c1 * np.int64(m) + c2
        ukey, slot = np.unique(key, return_inverse=True)
        return cls(m, n, problem.cam_idx, problem.pt_idx, o1, o2, c1, c2,
                   slot.astype(np.int64), (ukey // m).astype(np.int64),
                   (ukey % m).astype(np.int64))


@dataclass
class NormalBlocks:
    """Damped block normal equations of one iteration."""

    B: np.ndarray        # (m, 6, 6), damped camera blocks
    C: np.ndarray        # (n, 3, 3), damped point blocks
    Cinv: np.ndarray     # (n, 3, 3)
    E: np.ndarray        # (q, 6, 3), one block per observation
    v: np.ndarray        # (m, 6)
    w: np.ndarray        # (n, 3)
    lam: float


def apply_diagonal_damping(blocks: np.ndarray, lam: float) -> None:
    """In place: M <- M + lam * diag(M), block-wise."""
    d = blocks.shape[-1]
    idx = np.arange(d)
    blocks[..., idx, idx] *= 1.0 + lam


def invert_spd_blocks(blocks: np.ndarray, error: type[Exception]) -> np.ndarray:
    """Inverses of a batch of small SPD blocks, validating definiteness."""
    try:
        np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError:
        d = blocks.shape[-1]
        diag = blocks[..., np.arange(d), np.arange(d)]
        bad = np.flatnonzero(np.any(diag <= 0, axis=-1))
        detail = f"zero diagonal entries in blocks {bad[:8].tolist()}" if bad.size \
            else "non positive definite block"
        raise error(detail) from None
    return np.linalg.inv(blocks)


def assemble_normal_blocks(blocks: JacobianBlocks, structure: ProblemStructure,
                           lam: float) -> NormalBlocks:
    """Accumulate damped B, C, E, v, w from per-observation outer products."""
    m, n = structure.m, structure.n
    ci, pi = structure.cam_idx, structure.pt_idx
    jc, jp, res = blocks.jac_cam, blocks.jac_pt, blocks.res

    B = np.zeros((m, 6, 6))
    np.add.at(B, ci, np.einsum("qai,qaj->qij", jc, jc))
    C = np.zeros((n, 3, 3))
    np.add.at(C, pi, np.einsum("qai,qaj->qij", jp, jp))
    E = np.einsum("qai,qaj->qij", jc, jp)
    v = np.zeros((m, 6))
    np.add.at(v, ci, -np.einsum("qai,qa->qi", jc, res))
    w = np.zeros((n, 3))
    np.add.at(w, pi, -np.einsum("qai,qa->qi", jp, res))

    apply_diagonal_damping(B, lam)
    apply_diagonal_damping(C, lam)
    Cinv = invert_spd_blocks(C, SingularPointBlock)
    return NormalBlocks(B, C, Cinv, E, v, w, lam)


@dataclass
class ReducedCameraSystem:
    """Block-sparse symmetric S and right-hand side of the camera system."""

    diag: np.ndarray       # (m, 6, 6) diagonal blocks
    off: np.ndarray        # (u, 6, 6) blocks for unique camera pairs i < k
    off_cam1: np.ndarray   # (u,)
    off_cam2: np.ndarray
    rhs: np.ndarray        # (m, 6)

    @property
    def m(self) -> int:
        return self.diag.shape[0]

    def num_blocks(self) -> int:
        """Stored blocks: one per covisible camera pair plus m diagonal."""
        return self.m + self.off.shape[0]

    def to_dense(self) -> np.ndarray:
        m = self.m
        S = np.zeros((m, m, 6, 6))
        S[np.arange(m), np.arange(m)] = self.diag
        S[self.off_cam1, self.off_cam2] = self.off
        S[self.off_cam2, self.off_cam1] = np.swapaxes(self.off, -1, -2)
        return S.transpose(0, 2, 1, 3).reshape(6 * m, 6 * m)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        m = self.m
        xb = x.reshape(m, 6)
        y = np.einsum("mij,mj->mi", self.diag, xb)
        if self.off.shape[0]:
            np.add.at(y, self.off_cam1,
                      np.einsum("uij,uj->ui", self.off, xb[self.off_cam2]))
            np.add.at(y, self.off_cam2,
                      np.einsum("uji,uj->ui", self.off, xb[self.off_cam1]))
        return y.reshape(6 * m)


def schur_reduce(nb: NormalBlocks, structure: ProblemStructure) -> ReducedCameraSystem:
    """Eliminate point blocks: S = B - E C^-1 E^T, rhs = v - E C^-1 w."""
    ci, pi = structure.cam_idx, structure.pt_idx
    G = nb.E @ nb.Cinv[pi]                     # (q, 6, 3)

    diag = nb.B.copy()
    np.add.at(diag, ci, -np.einsum("qij,qkj->qik", G, nb.E))
    rhs = nb.v.copy()
    np.add.at(rhs, ci, -np.einsum("qij,qj->qi", G, nb.w[pi]))

    off = np.zeros((structure.upair_cam1.shape[0], 6, 6))
    if structure.pair_o1.shape[0]:
        contrib = -np.einsum("pij,pkj->pik", G[structure.pair_o1],
                             nb.E[structure.pair_o2])
        np.add.at(off, structure.pair_slot, contrib)
    return ReducedCameraSystem(diag, off, structure.upair_cam1,
                               structure.upair_cam2, rhs)


def solve_rcs(rcs: ReducedCameraSystem, method: str = "dense-cholesky",
              pcg_tol: float = 1e-6, pcg_max_iter: int = 500) -> np.ndarray:
    """Solve S dc = rhs. Dense Cholesky or block-Jacobi PCG."""
    if method == "dense-cholesky":
        return _solve_dense(rcs)
    if method == "block-jacobi-pcg":
        return _solve_pcg(rcs, pcg_tol, pcg_max_iter)
    raise ValueError(f"unknown rcs method {method!r}")


def solve_spd_dense(S: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Dense Cholesky solve with iterative refinement towards |Sx-b| <= tol |b|."""
    try:
        cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    x = scipy.linalg.cho_solve(cf, b, check_finite=False)
    bnorm = np.linalg.norm(b)
    if bnorm > 0:
        for _ in range(3):
            r = b - S @ x
            if np.linalg.norm(r) <= tol * bnorm:
                break
            x = x + scipy.linalg.cho_solve(cf, r, check_finite=False)
    return x


def _solve_dense(rcs: ReducedCameraSystem) -> np.ndarray:
    return solve_spd_dense(rcs.to_dense(), rcs.rhs.reshape(-1))


def _block_jacobi_inverse(rcs: ReducedCameraSystem) -> np.ndarray:
    return invert_spd_blocks(rcs.diag, NotPositiveDefinite)


def _solve_pcg(rcs: ReducedCameraSystem, tol: float, max_iter: int) -> np.ndarray:
    b = rcs.rhs.reshape(-1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    Minv = _block_jacobi_inverse(rcs)
    m = rcs.m

    def precond(r: np.ndarray) -> np.ndarray:
        return np.einsum("mij,mj->mi", Minv, r.reshape(m, 6)).reshape(-1)

    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        Ap = rcs.matvec(p)
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise PcgStalled(
        f"relative residual {np.linalg.norm(r) / bnorm:.3e} after {max_iter} iterations")


def back_substitute(nb: NormalBlocks, dc: np.ndarray,
                    structure: ProblemStructure) -> np.ndarray:
    """Recover point steps: dp_j = C_j^-1 (w_j - sum_i E_ij^T dc_i)."""
    ci, pi = structure.cam_idx, structure.pt_idx
    dcb = dc.reshape(structure.m, 6)
    t = np.einsum("qij,qi->qj", nb.E, dcb[ci])      # (q, 3)
    acc = nb.w.copy()
    np.add.at(acc, pi, -t)
    return np.einsum("nij,nj->ni", nb.Cinv, acc).reshape(-1)


def assembled_gradient(blocks: JacobianBlocks, structure: ProblemStructure
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Undamped gradient halves (v, w) = (-Jc^T f, -Jp^T f), block layout."""
    v = np.zeros((structure.m, 6))
    np.add.at(v, structure.cam_idx, -np.einsum("qai,qa->qi", blocks.jac_cam, blocks.res))
    w = np.zeros((structure.n, 3))
    np.add.at(w, structure.pt_idx, -np.einsum("qai,qa->qi", blocks.jac_pt, blocks.res))
    return v, w
