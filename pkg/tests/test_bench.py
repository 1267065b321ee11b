"""Perturbation, synthetic generation and performance profiles."""

import numpy as np
import pytest

from stba import (CostCurve, InfeasibleSpec, PerturbSpec, ProfileInput,
                  SyntheticSpec, generate_synthetic, lm_minimize, perturb,
                  total_cost, SolverConfig)
from stba.bench import performance_profile, profile_rows, threshold_cost, times_to_threshold
from stba.rotation import rotation_matrices

from conftest import make_toy


class TestPerturb:
    def test_zero_sigma_identity(self, toy_problem):
        q = perturb(toy_problem, PerturbSpec(0.0, 0.0, seed=1))
        np.testing.assert_array_equal(q.points, toy_problem.points)
        np.testing.assert_array_equal(q.translations, toy_problem.translations)

    def test_same_seed_bit_identical(self, toy_problem):
        a = perturb(toy_problem, PerturbSpec(0.5, 0.5, seed=7))
        b = perturb(toy_problem, PerturbSpec(0.5, 0.5, seed=7))
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.translations, b.translations)

    def test_rotations_and_observations_untouched(self, toy_problem):
        q = perturb(toy_problem, PerturbSpec(1.0, 1.0, seed=2))
        np.testing.assert_array_equal(q.rotations, toy_problem.rotations)
        np.testing.assert_array_equal(q.pixels, toy_problem.pixels)

    def test_center_shift_chi_square_expectation(self):
        # E |shift|^2 = 3 sigma^2, checked over 10^4 cameras
        m = 10_000
        problem = generate_synthetic(SyntheticSpec(
            cameras=m, points=m, views=2, seed=3, layout="grid-street"))
        sigma = 3.0
        q = perturb(problem, PerturbSpec(0.0, sigma, seed=4))
        R = rotation_matrices(problem.rotations)
        c0 = -np.einsum("mji,mj->mi", R, problem.translations)
        c1 = -np.einsum("mji,mj->mi", R, q.translations)
        mean_sq = float(np.mean(np.sum((c1 - c0) ** 2, axis=1)))
        assert mean_sq == pytest.approx(3 * sigma * sigma, rel=0.05)

    def test_negative_sigma_rejected(self, toy_problem):
        with pytest.raises(ValueError):
            perturb(toy_problem, PerturbSpec(-1.0, 0.0, 0))


class TestGenerate:
    def test_ring_ground_truth_cost_zero(self):
        p = generate_synthetic(SyntheticSpec(cameras=20, points=500, views=4,
                                             seed=5))
        assert total_cost(p, p.pack_params()) == pytest.approx(0.0, abs=1e-18)

    def test_every_point_has_requested_views(self):
        for layout in ("ring", "grid-street"):
            p = generate_synthetic(SyntheticSpec(cameras=10, points=40, views=3,
                                                 seed=6, layout=layout))
            counts = np.bincount(p.pt_idx)
            assert np.all(counts == 3)
            assert np.all(np.bincount(p.cam_idx, minlength=10) >= 1)

    def test_infeasible_specs_rejected(self):
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(SyntheticSpec(cameras=1, points=10))
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(SyntheticSpec(cameras=4, points=16, views=1))
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(SyntheticSpec(cameras=4, points=16, views=5))
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(SyntheticSpec(cameras=10, points=12, views=2,
                                             layout="ring"))
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(SyntheticSpec(cameras=4, points=16,
                                             layout="spiral"))

    def test_deterministic_given_seed(self):
        a = generate_synthetic(SyntheticSpec(cameras=6, points=20, views=3, seed=9))
        b = generate_synthetic(SyntheticSpec(cameras=6, points=20, views=3, seed=9))
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_noise_floor_prediction(self):
        # starting at ground truth of a noisy problem, LM settles within 20%
        # of q * E[rho(|n|^2)], n ~ N(0, sigma_px^2 I_2)
        sigma_px, delta = 1.0, 0.5
        p = generate_synthetic(SyntheticSpec(cameras=12, points=120, views=10,
                                             pixel_noise=sigma_px, seed=10))
        rng = np.random.default_rng(0)
        noise = sigma_px * rng.standard_normal((200_000, 2))
        s = np.sum(noise * noise, axis=1)
        from stba import huber_rho
        rho, _ = huber_rho(s, delta)
        predicted = p.num_observations * float(np.mean(rho))
        _, trace = lm_minimize(p, SolverConfig(solver="lm-dense",
                                               huber_delta=delta))
        assert trace.final_cost == pytest.approx(predicted, rel=0.2)


def _curve(times, costs, f0):
    return CostCurve(np.asarray(times, dtype=float),
                     np.asarray(costs, dtype=float), float(f0))


class TestProfiles:
    def test_threshold_formula(self):
        assert threshold_cost(100.0, 10.0, 0.1) == pytest.approx(19.0)

    def test_threshold_requires_open_interval(self):
        with pytest.raises(ValueError):
            threshold_cost(100.0, 10.0, 0.0)
        with pytest.raises(ValueError):
            threshold_cost(100.0, 10.0, 1.0)

    def test_single_solver_its_own_minimum(self):
        # a lone solver defines F* itself, so it reaches F_tau on every
        # problem and rho is flat at 100 for every alpha >= 1
        inputs = ProfileInput(problems=["p1", "p2"], solvers=["s"])
        inputs.add("p1", "s", _curve([1, 2], [50, 10], 100))
        inputs.add("p2", "s", _curve([1, 2], [90, 80], 100))
        table = performance_profile(inputs, 0.1, [1, 2, 4])
        np.testing.assert_array_equal(table["s"], [100.0, 100.0, 100.0])

    def test_two_solvers_constant_factor(self):
        # solver A always twice as fast: rho(A, 1) = 100, rho(B, a<2) = 0
        inputs = ProfileInput(problems=["p1", "p2"], solvers=["A", "B"])
        for p, t in (("p1", 1.0), ("p2", 3.0)):
            inputs.add(p, "A", _curve([t], [0.0], 100))
            inputs.add(p, "B", _curve([2 * t], [0.0], 100))
        table = performance_profile(inputs, 0.5, [1, 1.5, 2, 4])
        np.testing.assert_array_equal(table["A"], [100, 100, 100, 100])
        np.testing.assert_array_equal(table["B"], [0, 0, 100, 100])

    def test_rho_monotone_in_alpha(self):
        rng = np.random.default_rng(11)
        inputs = ProfileInput(problems=[f"p{i}" for i in range(6)],
                              solvers=["a", "b", "c"])
        for p in inputs.problems:
            for s in inputs.solvers:
                n = int(rng.integers(3, 8))
                costs = np.sort(rng.uniform(0, 90, n))[::-1]
                times = np.cumsum(rng.uniform(0.1, 2, n))
                inputs.add(p, s, _curve(times, costs, 100))
        alphas = [1, 2, 4, 8, 16]
        table = performance_profile(inputs, 0.3, alphas)
        for s in inputs.solvers:
            assert np.all(np.diff(table[s]) >= 0)
            assert np.all(table[s] <= 100)

    def test_tighter_tau_takes_longer(self):
        rng = np.random.default_rng(12)
        inputs = ProfileInput(problems=["p"], solvers=["a", "b"])
        for s in inputs.solvers:
            costs = np.sort(rng.uniform(0, 90, 6))[::-1]
            times = np.cumsum(rng.uniform(0.1, 2, 6))
            inputs.add("p", s, _curve(times, costs, 100))
        for s in inputs.solvers:
            t_loose = times_to_threshold(inputs, 0.3)[("p", s)]
            t_tight = times_to_threshold(inputs, 0.01)[("p", s)]
            assert t_tight >= t_loose

    def test_profile_rows_shape(self):
        inputs = ProfileInput(problems=["p1", "p2", "p3"], solvers=["a", "b"])
        for p in inputs.problems:
            for s in inputs.solvers:
                inputs.add(p, s, _curve([1.0], [5.0], 100))
        taus, alphas = [0.1, 0.01], [1, 2, 4]
        rows = profile_rows(inputs, taus, alphas)
        assert len(rows) == 2 * len(taus) * len(alphas)

    def test_unreached_threshold_counts_unsolved(self):
        inputs = ProfileInput(problems=["p"], solvers=["a", "b"])
        inputs.add("p", "a", _curve([1.0], [0.0], 100))
        inputs.add("p", "b", _curve([1.0], [60.0], 100))
        table = performance_profile(inputs, 0.1, [1, 1e9])
        np.testing.assert_array_equal(table["a"], [100, 100])
        np.testing.assert_array_equal(table["b"], [0, 0])

    def test_curve_from_trace_uses_accepted_best(self):
        problem = make_toy(cameras=6, points=16, seed=13, sigma=0.1)
        _, trace = lm_minimize(problem, SolverConfig(solver="lm-dense"))
        curve = CostCurve.from_trace(trace)
        assert curve.initial_cost == trace.initial_cost
        assert np.all(np.diff(curve.best_costs) <= 0)
        assert curve.final_cost == pytest.approx(trace.final_cost)
        assert np.all(np.diff(curve.times_ms) >= 0)
