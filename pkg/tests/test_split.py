"""Point splitting, constraint rows, the steepest-descent correction and the
per-cluster Schur systems, all against dense oracles."""

from dataclasses import replace

import numpy as np
import pytest

from stba.clustering import (ClusterAssignment, build_camera_graph,
                             cluster_stochastic, single_cluster)
from stba.linear import ProblemStructure, assemble_normal_blocks, schur_reduce
from stba.robust import weighted_blocks
from stba.stochastic import (StbaStepEngine, assemble_split_blocks,
                             build_constraints, cluster_schur, solve_clusters,
                             split_points, steepest_descent_correction,
                             unified_point_update)

from conftest import make_toy


def _assign(problem, gamma, seed=0):
    g = build_camera_graph(problem)
    return cluster_stochastic(g, gamma, 10.0, np.random.default_rng(seed))


def _split_state(problem, assignment, lam=1e-4, delta=np.inf):
    x = problem.pack_params()
    jb = weighted_blocks(problem, x, delta)
    st = ProblemStructure.build(problem)
    nb = assemble_normal_blocks(jb, st, lam)
    split = split_points(problem, assignment)
    sb = assemble_split_blocks(jb, split, lam, st, nb)
    return jb, st, nb, split, sb


class TestSplitPoints:
    def test_single_cluster_is_identity(self, toy_problem):
        a = single_cluster(toy_problem.num_cameras)
        split = split_points(toy_problem, a)
        assert split.num_virtual == toy_problem.num_points
        np.testing.assert_array_equal(split.virt_of_obs, toy_problem.pt_idx)
        assert split.num_constraints == 0
        assert build_constraints(split).count == 0

    def test_copy_count_is_observing_cluster_count(self, medium_problem):
        a = _assign(medium_problem, gamma=3)
        split = split_points(medium_problem, a)
        for j in range(medium_problem.num_points):
            cams = medium_problem.cam_idx[medium_problem.pt_idx == j]
            k = len(set(a.cluster_of[cams].tolist()))
            assert np.count_nonzero(split.virt_point == j) == k

    def test_per_camera_clusters_copy_per_observation(self, toy_problem):
        m = toy_problem.num_cameras
        a = ClusterAssignment(np.arange(m, dtype=np.int64), m)
        split = split_points(toy_problem, a)
        assert split.num_virtual == toy_problem.num_observations
        # each point's copy count equals its view count
        counts = np.bincount(toy_problem.pt_idx)
        copies = np.bincount(split.virt_point)
        np.testing.assert_array_equal(copies, counts)

    def test_constraint_count(self, medium_problem):
        a = _assign(medium_problem, gamma=3)
        split = split_points(medium_problem, a)
        cons = build_constraints(split)
        assert cons.count == split.num_virtual - medium_problem.num_points
        assert cons.count == split.num_constraints
        # star topology: anchors are each point's first copy
        for t in range(cons.count):
            assert split.virt_point[cons.anchor[t]] == split.virt_point[cons.other[t]]
            assert cons.anchor[t] < cons.other[t]


class TestAssembleSplitBlocks:
    def test_single_cluster_reduces_to_unsplit(self, toy_problem):
        a = single_cluster(toy_problem.num_cameras)
        jb, st, nb, split, sb = _split_state(toy_problem, a)
        np.testing.assert_array_equal(sb.Cp, nb.C)
        np.testing.assert_array_equal(sb.wp, nb.w)
        np.testing.assert_array_equal(sb.Cp_inv, nb.Cinv)

    def test_virtual_blocks_sum_to_unsplit_before_damping(self, medium_problem):
        a = _assign(medium_problem, gamma=3)
        lam = 0.3
        jb, st, nb, split, sb = _split_state(medium_problem, a, lam=lam)
        # sum over a point's copies of (damped C') equals damped unsplit C on
        # off-diagonals; diagonals each get their own lam * diag term which
        # also sums to the unsplit damping because diag is additive
        summed = np.zeros_like(nb.C)
        np.add.at(summed, split.virt_point, sb.Cp)
        np.testing.assert_allclose(summed, nb.C, rtol=1e-12, atol=1e-12)

    def test_split_jacobian_sum_identity(self, medium_problem):
        # summing the virtual-point column blocks over a point's copies
        # reproduces the unsplit point Jacobian bit-exactly: every entry has
        # exactly one addend because each observation lives in one copy
        a = _assign(medium_problem, gamma=2, seed=5)
        x = medium_problem.pack_params()
        jb = weighted_blocks(medium_problem, x, np.inf)
        split = split_points(medium_problem, a)
        q, n = medium_problem.num_observations, medium_problem.num_points
        nv = split.num_virtual
        Jp = np.zeros((2 * q, 3 * n))
        Jsplit = np.zeros((2 * q, 3 * nv))
        for o in range(q):
            p, v = medium_problem.pt_idx[o], split.virt_of_obs[o]
            Jp[2 * o:2 * o + 2, 3 * p:3 * p + 3] = jb.jac_pt[o]
            Jsplit[2 * o:2 * o + 2, 3 * v:3 * v + 3] = jb.jac_pt[o]
        resum = np.zeros_like(Jp)
        for v in range(nv):
            p = split.virt_point[v]
            resum[:, 3 * p:3 * p + 3] += Jsplit[:, 3 * v:3 * v + 3]
        np.testing.assert_array_equal(resum, Jp)

    def test_two_cluster_shared_point_splits_observations(self):
        problem = make_toy(cameras=4, points=8, views=4, seed=30, sigma=0.05)
        # force two clusters of two cameras each
        a = ClusterAssignment(np.array([0, 0, 1, 1]), 2)
        jb, st, nb, split, sb = _split_state(problem, a)
        # every point is seen by all 4 cameras -> 2 copies with 2 obs each
        assert split.num_virtual == 2 * problem.num_points
        for v in range(split.num_virtual):
            assert np.count_nonzero(split.virt_of_obs == v) == 2


class TestCorrection:
    def test_no_constraints_leaves_gradient_unchanged(self, toy_problem):
        a = single_cluster(toy_problem.num_cameras)
        jb, st, nb, split, sb = _split_state(toy_problem, a)
        cons = build_constraints(split)
        out = steepest_descent_correction(sb.wp, sb, cons)
        np.testing.assert_array_equal(out, sb.wp)

    def test_closed_form_matches_dense_oracle(self):
        for seed in (0, 1, 2):
            problem = make_toy(cameras=6, points=18, views=3, seed=seed,
                               sigma=0.2)
            a = _assign(problem, gamma=3, seed=seed)
            if a.num_clusters < 2:
                continue
            jb, st, nb, split, sb = _split_state(problem, a, lam=0.5, delta=0.5)
            cons = build_constraints(split)
            got = steepest_descent_correction(sb.wp, sb, cons)

            nv, r = split.num_virtual, cons.count
            A = np.zeros((3 * r, 3 * nv))
            for t in range(r):
                A[3 * t:3 * t + 3, 3 * cons.anchor[t]:3 * cons.anchor[t] + 3] = np.eye(3)
                A[3 * t:3 * t + 3, 3 * cons.other[t]:3 * cons.other[t] + 3] = -np.eye(3)
            h = sb.Cp[:, np.arange(3), np.arange(3)].reshape(-1)
            g = sb.wp.reshape(-1)
            Hinv = np.diag(1.0 / h)
            nu = np.linalg.solve(A @ Hinv @ A.T, A @ Hinv @ g)
            want = g - A.T @ nu
            assert np.abs(got.reshape(-1) - want).max() <= 1e-10 * max(
                1.0, np.abs(want).max())

    def test_corrected_gradient_is_constraint_consistent(self):
        # under the diagonal model, the corrected step satisfies A dx = 0
        problem = make_toy(cameras=6, points=18, views=3, seed=4, sigma=0.2)
        a = _assign(problem, gamma=3, seed=1)
        jb, st, nb, split, sb = _split_state(problem, a, lam=0.5)
        cons = build_constraints(split)
        wp = steepest_descent_correction(sb.wp, sb, cons)
        h = sb.Cp[:, np.arange(3), np.arange(3)]
        step = wp / h
        viol = step[cons.anchor] - step[cons.other]
        assert np.abs(viol).max() < 1e-10 * max(1.0, np.abs(step).max())

    def test_not_invoked_below_lambda(self):
        # engine-level behavior: lam = 0.05 must not apply the correction
        problem = make_toy(cameras=6, points=18, views=3, seed=5, sigma=0.1)
        from stba.lm import SolverConfig
        cfg = SolverConfig(solver="stba", gamma=3, lambda0=0.05,
                           max_iterations=1)
        from stba.stochastic import stba_minimize
        _, trace = stba_minimize(problem, cfg)
        assert not trace.records[0].correction_applied
        cfg2 = SolverConfig(solver="stba", gamma=3, lambda0=0.2,
                            max_iterations=1)
        _, trace2 = stba_minimize(problem, cfg2)
        assert trace2.records[0].correction_applied


class TestClusterSchur:
    def test_single_cluster_equals_full_schur(self, medium_problem):
        a = single_cluster(medium_problem.num_cameras)
        jb, st, nb, split, sb = _split_state(medium_problem, a)
        rcs = schur_reduce(nb, st)
        system = cluster_schur(sb, split, a, st)
        assert system.num_clusters == 1
        S = rcs.to_dense()
        assert np.abs(system.matrices[0] - S).max() <= 1e-12 * np.abs(S).max()
        np.testing.assert_array_equal(system.rhs[0], rcs.rhs.reshape(-1))

    def test_cross_cluster_blocks_structurally_absent(self, medium_problem):
        a = _assign(medium_problem, gamma=4, seed=2)
        jb, st, nb, split, sb = _split_state(medium_problem, a)
        system = cluster_schur(sb, split, a, st)
        # blocks exist only inside clusters by construction; verify against
        # the dense split Schur complement built from the split Jacobian
        S_split = _dense_split_schur(medium_problem, a, lam=1e-4)
        m = medium_problem.num_cameras
        for i in range(m):
            for k in range(m):
                if a.cluster_of[i] != a.cluster_of[k]:
                    blk = S_split[6 * i:6 * i + 6, 6 * k:6 * k + 6]
                    np.testing.assert_array_equal(blk, np.zeros((6, 6)))

    def test_matches_dense_split_construction(self, medium_problem):
        lam = 1e-3
        a = _assign(medium_problem, gamma=4, seed=3)
        jb, st, nb, split, sb = _split_state(medium_problem, a, lam=lam)
        system = cluster_schur(sb, split, a, st)
        S_split = _dense_split_schur(medium_problem, a, lam=lam)
        scale = np.abs(S_split).max()
        for c in range(system.num_clusters):
            cams = system.cam_order[system.starts[c]:system.starts[c + 1]]
            sz = len(cams)
            want = np.zeros((6 * sz, 6 * sz))
            for li, gi in enumerate(cams):
                for lk, gk in enumerate(cams):
                    want[6 * li:6 * li + 6, 6 * lk:6 * lk + 6] = \
                        S_split[6 * gi:6 * gi + 6, 6 * gk:6 * gk + 6]
            assert np.abs(system.matrices[c] - want).max() <= 1e-11 * scale

    def test_disconnected_clusters_solve_jointly_or_separately(self):
        problem = make_toy(cameras=6, points=18, views=3, seed=6, sigma=0.1)
        a = _assign(problem, gamma=3, seed=0)
        jb, st, nb, split, sb = _split_state(problem, a)
        system = cluster_schur(sb, split, a, st)
        dc = solve_clusters(system, workers=1)
        # block-diagonal joint solve gives the same answer
        total = sum(M.shape[0] for M in system.matrices)
        J = np.zeros((total, total))
        rhs = np.concatenate(system.rhs)
        at = 0
        for M in system.matrices:
            J[at:at + M.shape[0], at:at + M.shape[0]] = M
            at += M.shape[0]
        joint = np.linalg.solve(J, rhs)
        got = np.concatenate([dc.reshape(-1, 6)[system.cam_order[
            system.starts[c]:system.starts[c + 1]]].reshape(-1)
            for c in range(system.num_clusters)])
        # LU vs refined Cholesky differ by cond * eps
        assert np.linalg.norm(got - joint) <= 1e-8 * np.linalg.norm(joint)


class TestSolveClusters:
    def test_singleton_clusters_are_six_by_six(self, toy_problem):
        m = toy_problem.num_cameras
        a = ClusterAssignment(np.arange(m, dtype=np.int64), m)
        jb, st, nb, split, sb = _split_state(toy_problem, a)
        system = cluster_schur(sb, split, a, st)
        assert all(M.shape == (6, 6) for M in system.matrices)
        dc = solve_clusters(system)
        assert dc.shape == (6 * m,)

    def test_worker_counts_bit_identical(self, medium_problem):
        a = _assign(medium_problem, gamma=3, seed=7)
        jb, st, nb, split, sb = _split_state(medium_problem, a)
        system = cluster_schur(sb, split, a, st)
        dc1 = solve_clusters(system, workers=1)
        dc8 = solve_clusters(system, workers=8)
        np.testing.assert_array_equal(dc1, dc8)

    def test_per_cluster_residual_contract(self, medium_problem):
        a = _assign(medium_problem, gamma=4, seed=8)
        jb, st, nb, split, sb = _split_state(medium_problem, a)
        system = cluster_schur(sb, split, a, st)
        dc = solve_clusters(system).reshape(-1, 6)
        for c in range(system.num_clusters):
            cams = system.cam_order[system.starts[c]:system.starts[c + 1]]
            res = system.matrices[c] @ dc[cams].reshape(-1) - system.rhs[c]
            assert np.linalg.norm(res) <= 1e-10 * max(
                1e-30, np.linalg.norm(system.rhs[c]))


class TestUnifiedPointUpdate:
    def test_equals_lm_back_substitution(self, medium_problem):
        from stba.linear import back_substitute
        a = _assign(medium_problem, gamma=4, seed=9)
        jb, st, nb, split, sb = _split_state(medium_problem, a)
        rng = np.random.default_rng(0)
        dc = rng.normal(size=6 * medium_problem.num_cameras)
        np.testing.assert_array_equal(unified_point_update(nb, dc, st),
                                      back_substitute(nb, dc, st))

    def test_matches_dense_unsplit_normal_equations(self, toy_problem):
        # dp = C^-1 (w - E^T dc) from the dense unsplit system
        from conftest import dense_jacobian
        lam = 1e-4
        x = toy_problem.pack_params()
        jb = weighted_blocks(toy_problem, x, np.inf)
        st = ProblemStructure.build(toy_problem)
        nb = assemble_normal_blocks(jb, st, lam)
        J, f = dense_jacobian(toy_problem, x)
        H = J.T @ J
        H += lam * np.diag(np.diag(H))
        g = -J.T @ f
        m = toy_problem.num_cameras
        rng = np.random.default_rng(1)
        dc = rng.normal(size=6 * m) * 0.01
        Hpp = H[6 * m:, 6 * m:]
        Hpc = H[6 * m:, :6 * m]
        want = np.linalg.solve(Hpp, g[6 * m:] - Hpc @ dc)
        got = unified_point_update(nb, dc, st)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)


def _dense_split_schur(problem, assignment, lam):
    """Dense S' = B - E' C'^-1 E'^T built from the split Jacobian."""
    x = problem.pack_params()
    jb = weighted_blocks(problem, x, np.inf)
    split = split_points(problem, assignment)
    q, m, nv = problem.num_observations, problem.num_cameras, split.num_virtual
    Jc = np.zeros((2 * q, 6 * m))
    Jp = np.zeros((2 * q, 3 * nv))
    for o in range(q):
        c, v = problem.cam_idx[o], split.virt_of_obs[o]
        Jc[2 * o:2 * o + 2, 6 * c:6 * c + 6] = jb.jac_cam[o]
        Jp[2 * o:2 * o + 2, 3 * v:3 * v + 3] = jb.jac_pt[o]
    B = Jc.T @ Jc
    B += lam * np.diag(np.diag(B))
    Cp = Jp.T @ Jp
    Cp += lam * np.diag(np.diag(Cp))
    E = Jc.T @ Jp
    return B - E @ np.linalg.solve(Cp, E.T)


def test_dropped_degenerate_virtual_point():
    # a cluster seeing a point only from an identity-rotation camera whose
    # optical axis hits the point: the split 3x3 block gets an exactly zero
    # diagonal entry (the depth column vanishes) and is dropped for the
    # iteration, while the unsplit system still handles the point
    from stba import BundleProblem, Camera, project

    rots = np.zeros((3, 3))
    trs = np.array([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [-0.4, 0.0, 0.0]])
    pts = np.array([[0.0, 0.0, -2.0],     # on camera 0's optical axis
                    [0.3, 0.2, -1.5],
                    [-0.2, 0.1, -1.8],
                    [0.1, -0.3, -2.2]])
    cam_idx = np.array([0, 1, 0, 1, 1, 2, 0, 2])
    pt_idx = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    pixels = np.array([
        project(Camera(rots[c], trs[c], 100.0, np.zeros(2)), pts[p]) + 0.2
        for c, p in zip(cam_idx, pt_idx)])
    order = np.argsort(pt_idx * 3 + cam_idx)
    problem = BundleProblem(rots, trs, np.full(3, 100.0), np.zeros((3, 2)),
                            pts, cam_idx[order], pt_idx[order], pixels[order])

    # camera 0 alone in its cluster: point 0's copy there has one observation
    a = ClusterAssignment(np.array([0, 1, 1]), 2)
    jb, st, nb, split, sb = _split_state(problem, a)
    v0 = split.virt_of_obs[np.flatnonzero(
        (problem.cam_idx == 0) & (problem.pt_idx == 0))[0]]
    assert sb.dropped_virtual[v0]
    assert sb.n_dropped_obs == 1
    assert np.all(sb.Cp_inv[v0] == 0.0)
    assert np.all(np.isfinite(sb.Cp_inv))
    # the dropped observation contributes nothing to the cluster systems
    system = cluster_schur(sb, split, a, st)
    dc = solve_clusters(system)
    assert np.all(np.isfinite(dc))
