"""Shared toy problems and dense oracles for the test suite."""

import numpy as np
import pytest

from stba import PerturbSpec, SyntheticSpec, generate_synthetic, perturb
from stba.robust import weighted_blocks


def make_toy(cameras=4, points=10, seed=0, sigma=0.05, views=3, pixel_noise=0.0,
             layout="ring", sigma_seed_offset=1000):
    """Small perturbed synthetic problem."""
    problem = generate_synthetic(SyntheticSpec(
        cameras=cameras, points=points, layout=layout, views=views,
        pixel_noise=pixel_noise, seed=seed))
    if sigma:
        problem = perturb(problem, PerturbSpec(sigma, sigma, seed + sigma_seed_offset))
    return problem


def dense_jacobian(problem, x, delta=np.inf):
    """Full dense weighted Jacobian and residual vector."""
    jb = weighted_blocks(problem, x, delta)
    q, m, n = problem.num_observations, problem.num_cameras, problem.num_points
    J = np.zeros((2 * q, 6 * m + 3 * n))
    for o in range(q):
        c, p = problem.cam_idx[o], problem.pt_idx[o]
        J[2 * o:2 * o + 2, 6 * c:6 * c + 6] = jb.jac_cam[o]
        J[2 * o:2 * o + 2, 6 * m + 3 * p:6 * m + 3 * p + 3] = jb.jac_pt[o]
    return J, jb.res.reshape(-1)


def dense_lm_step(problem, x, lam, delta=np.inf):
    """Oracle: solve the damped normal equations densely."""
    J, f = dense_jacobian(problem, x, delta)
    H = J.T @ J
    H += lam * np.diag(np.diag(H))
    return np.linalg.solve(H, -J.T @ f)


@pytest.fixture
def toy_problem():
    return make_toy(cameras=4, points=10, seed=0, sigma=0.05)


@pytest.fixture
def medium_problem():
    return make_toy(cameras=10, points=60, seed=2, sigma=0.1, views=4)
