"""Huber kernel and analytic residual Jacobians with IRLS reweighting.

The robust cost is ``sum_i rho(|r_i|^2)`` with the Huber kernel rho. Blocks
are reweighted by ``sqrt(rho'(s))`` so the weighted Gauss-Newton system equals
the robustified normal equations to first order. The weight is frozen at the
linearization point (plain IRLS; no second-order kernel correction), which
makes the assembled gradient exact for the robust cost while the weighted
Jacobian blocks are the weight times the raw projection Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .rotation import rotation_derivative, rotation_matrices

if TYPE_CHECKING:
    from .problem import BundleProblem

DEPTH_EPS = 1e-12


def huber_rho(s, delta: float):
    """Huber kernel on squared norms: rho(s) and rho'(s).

    For s <= delta^2: (s, 1); above: (2*delta*sqrt(s) - delta^2, delta/sqrt(s)).
    delta = inf disables robustification. Accepts scalars or arrays.
    """
    s = np.asarray(s, dtype=np.float64)
    if not delta > 0:
        raise ValueError("huber delta must be positive (or inf)")
    if np.isinf(delta):
        return s.copy(), np.ones_like(s)
    tail = s > delta * delta
    root = np.sqrt(np.where(tail, s, 1.0))
    rho = np.where(tail, 2.0 * delta * root - delta * delta, s)
    drho = np.where(tail, delta / root, 1.0)
    return rho, drho


@dataclass
class JacobianBlocks:
    """Per-observation weighted residuals and Jacobian blocks.

    Rows follow the problem's observation order. Degenerate projections get
    zero rows (and the configured cost penalty), counted in `n_degenerate`.
    """

    jac_cam: np.ndarray      # (q, 2, 6), d residual / d (rotation, translation)
    jac_pt: np.ndarray       # (q, 2, 3), d residual / d point
    res: np.ndarray          # (q, 2), weighted residuals
    degenerate: np.ndarray   # (q,) bool
    cost: float              # robust total cost at the linearization point

    @property
    def n_degenerate(self) -> int:
        return int(np.count_nonzero(self.degenerate))


def weighted_blocks(problem: "BundleProblem", x: np.ndarray, delta: float = np.inf,
                    degenerate_penalty: float = 1e8) -> JacobianBlocks:
    """Evaluate residuals and analytic Jacobian blocks at parameters x."""
    rot, tr, pts = problem.unpack_params(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite parameters")
    ci, pi = problem.cam_idx, problem.pt_idx

    R = rotation_matrices(rot)
    Rq = R[ci]
    w_obs = rot[ci]
    X = pts[pi]
    P = np.einsum("qij,qj->qi", Rq, X) + tr[ci]

    degenerate = np.abs(P[:, 2]) < DEPTH_EPS
    z = np.where(degenerate, 1.0, P[:, 2])

    p = -P[:, :2] / z[:, None]
    n2 = np.sum(p * p, axis=1)
    k1 = problem.distortions[ci, 0]
    k2 = problem.distortions[ci, 1]
    f = problem.focals[ci]
    rfac = 1.0 + k1 * n2 + k2 * n2 * n2

    res = f[:, None] * rfac[:, None] * p - problem.pixels

    # d proj / d p = f * (rfac * I + (2 k1 + 4 k2 n2) p p^T)
    gain = 2.0 * k1 + 4.0 * k2 * n2
    A = np.zeros((len(ci), 2, 2))
    A[:, 0, 0] = rfac + gain * p[:, 0] * p[:, 0]
    A[:, 1, 1] = rfac + gain * p[:, 1] * p[:, 1]
    A[:, 0, 1] = A[:, 1, 0] = gain * p[:, 0] * p[:, 1]
    A *= f[:, None, None]

    # d p / d P
    Dp = np.zeros((len(ci), 2, 3))
    inv_z = 1.0 / z
    Dp[:, 0, 0] = -inv_z
    Dp[:, 1, 1] = -inv_z
    Dp[:, 0, 2] = P[:, 0] * inv_z * inv_z
    Dp[:, 1, 2] = P[:, 1] * inv_z * inv_z

    M = A @ Dp  # (q, 2, 3) = d residual / d P

    dRX = rotation_derivative(w_obs, X, Rq)
    jac_cam = np.concatenate((M @ dRX, M), axis=2)
    jac_pt = M @ Rq

    s = np.sum(res * res, axis=1)
    rho, drho = huber_rho(s, delta)
    weight = np.sqrt(drho)

    res = weight[:, None] * res
    jac_cam *= weight[:, None, None]
    jac_pt *= weight[:, None, None]

    if np.any(degenerate):
        res[degenerate] = 0.0
        jac_cam[degenerate] = 0.0
        jac_pt[degenerate] = 0.0
        rho[degenerate] = degenerate_penalty

    return JacobianBlocks(jac_cam, jac_pt, res, degenerate, float(np.sum(rho)))
