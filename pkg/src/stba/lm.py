"""Levenberg-Marquardt solver and the trust-region loop shared with the
stochastically clustered variant.

Control loop: evaluate residuals and Jacobians, assemble the damped normal
equations, solve the reduced camera system, back-substitute, then accept the
step iff it strictly decreases the robust cost (lambda /= 3 on acceptance,
*= 3 on rejection). Tolerances follow the usual trio: gradient (checked right
after evaluation), cost |dF|/F and parameter |dx|/(|x|+1e-12), all against
`config.tolerance`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import NotPositiveDefinite, PcgStalled
from .linear import (ProblemStructure, assemble_normal_blocks, assembled_gradient,
                     back_substitute, schur_reduce, solve_rcs)
from .problem import BundleProblem, total_cost
from .robust import weighted_blocks
from .trace import IterationRecord, SolveTrace

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12
# largest camera count still solved with dense Cholesky when method is "auto"
DENSE_CAMERA_LIMIT = 800


@dataclass
class SolverConfig:
    """Solver parameters; defaults follow the reference configuration."""

    solver: str = "lm-dense"        # lm-dense | lm-pcg | stba | stba-fixed
    max_iterations: int = 100
    lambda0: float = 1e-4
    huber_delta: float = 0.5
    gamma: float = 100              # max cluster size; inf = single cluster
    beta: float = 10.0
    seed: int = 0
    workers: int = 1
    tolerance: float = 1e-6
    mode: str = "stochastic"        # stochastic | fixed
    rcs_method: str = "auto"        # auto | dense-cholesky | block-jacobi-pcg
    pcg_tolerance: float = 1e-6
    pcg_max_iterations: int = 500
    degenerate_penalty: float = 1e8
    log_clusterings: bool = False   # keep per-iteration assignments on the trace

    def validate(self) -> None:
        if self.solver not in ("lm-dense", "lm-pcg", "stba", "stba-fixed"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if not self.huber_delta > 0:
            raise ValueError("huber delta must be positive (or inf)")
        if not self.gamma >= 1:
            raise ValueError("gamma must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.mode not in ("stochastic", "fixed"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class DampingState:
    """Trust-region damping, clamped to [LAMBDA_MIN, LAMBDA_MAX]."""

    lam: float
    iteration: int = 0
    consecutive_failures: int = 0

    def accept(self) -> None:
        self.lam = max(self.lam / 3.0, LAMBDA_MIN)
        self.consecutive_failures = 0

    def reject(self) -> None:
        self.lam = min(self.lam * 3.0, LAMBDA_MAX)
        self.consecutive_failures += 1


class _Timer:
    def __init__(self):
        self.t = time.perf_counter()

    def lap_ms(self) -> float:
        now = time.perf_counter()
        ms = (now - self.t) * 1e3
        self.t = now
        return ms


class LmStepEngine:
    """One LM step: assemble, Schur-reduce, solve the RCS, back-substitute."""

    def __init__(self, problem: BundleProblem, config: SolverConfig):
        self.problem = problem
        self.config = config
        self.structure = ProblemStructure.build(problem)
        if config.rcs_method != "auto":
            self.rcs_method = config.rcs_method
        elif config.solver == "lm-pcg":
            self.rcs_method = "block-jacobi-pcg"
        elif config.solver == "lm-dense":
            self.rcs_method = "dense-cholesky"
        else:
            self.rcs_method = ("dense-cholesky" if problem.num_cameras <= DENSE_CAMERA_LIMIT
                               else "block-jacobi-pcg")

    def prepare(self, iteration: int, record: IterationRecord) -> None:
        pass

    def evaluate(self, x: np.ndarray):
        return weighted_blocks(self.problem, x, self.config.huber_delta,
                               self.config.degenerate_penalty)

    def step(self, jb, lam: float, record: IterationRecord
             ) -> tuple[np.ndarray, np.ndarray]:
        timer = _Timer()
        nb = assemble_normal_blocks(jb, self.structure, lam)
        rcs = schur_reduce(nb, self.structure)
        record.t_assembly_ms += timer.lap_ms()
        dc = solve_rcs(rcs, self.rcs_method, self.config.pcg_tolerance,
                       self.config.pcg_max_iterations)
        record.t_rcs_ms += timer.lap_ms()
        dp = back_substitute(nb, dc, self.structure)
        record.t_backsub_ms += timer.lap_ms()
        return dc, dp


def trust_region_loop(problem: BundleProblem, config: SolverConfig, engine
                      ) -> tuple[np.ndarray, SolveTrace]:
    """Shared damped trust-region iteration driving a step engine."""
    config.validate()
    m = problem.num_cameras
    x = problem.pack_params()
    trace = SolveTrace(solver=config.solver, seed=config.seed)
    damping = DampingState(lam=config.lambda0)
    tol = config.tolerance
    start = time.perf_counter()
    elapsed_ms = 0.0
    stop_reason = None

    def finish_record(record: IterationRecord) -> None:
        nonlocal elapsed_ms
        now_ms = (time.perf_counter() - start) * 1e3
        record.t_iter_ms = now_ms - elapsed_ms
        elapsed_ms = now_ms
        trace.records.append(record)

    for iteration in range(1, config.max_iterations + 1):
        damping.iteration = iteration
        record = IterationRecord(iteration=iteration, lam=damping.lam)
        timer = _Timer()
        engine.prepare(iteration, record)
        record.t_clustering_ms += timer.lap_ms()

        jb = engine.evaluate(x)
        record.t_jacobian_ms += timer.lap_ms()
        record.cost_before = jb.cost
        record.cost_after = jb.cost
        record.n_degenerate = jb.n_degenerate
        if iteration == 1:
            trace.initial_cost = jb.cost

        v, w = assembled_gradient(jb, engine.structure)
        record.t_assembly_ms += timer.lap_ms()
        grad_inf = max(float(np.abs(v).max()), float(np.abs(w).max()))
        record.grad_norm = grad_inf
        if grad_inf < tol:
            finish_record(record)
            stop_reason = "gradient_tolerance"
            break

        try:
            timer.lap_ms()
            dc, dp = engine.step(jb, damping.lam, record)
        except (NotPositiveDefinite, PcgStalled):
            damping.reject()
            finish_record(record)
            continue

        x_new = x.copy()
        x_new[:6 * m] += dc
        x_new[6 * m:] += dp
        cost_new = total_cost(problem, x_new, config.huber_delta,
                              config.degenerate_penalty)
        record.cost_after = cost_new
        step_norm = float(np.sqrt(np.dot(dc, dc) + np.dot(dp, dp)))
        record.step_norm = step_norm

        if abs(record.cost_before - cost_new) < tol * max(record.cost_before, 1e-300):
            stop_reason = "cost_tolerance"
        elif step_norm < tol * (float(np.linalg.norm(x)) + 1e-12):
            stop_reason = "parameter_tolerance"

        if cost_new < record.cost_before:
            record.accepted = True
            x = x_new
            damping.accept()
        else:
            damping.reject()

        finish_record(record)
        if stop_reason:
            break

    trace.termination = stop_reason or "max_iterations"
    trace.total_ms = (time.perf_counter() - start) * 1e3
    trace.final_cost = total_cost(problem, x, config.huber_delta,
                                  config.degenerate_penalty)
    return x, trace


def lm_minimize(problem: BundleProblem, config: SolverConfig | None = None
                ) -> tuple[np.ndarray, SolveTrace]:
    """Minimize the robust reprojection cost with plain Levenberg-Marquardt."""
    config = replace(config) if config else SolverConfig()
    if config.solver.startswith("stba"):
        config = replace(config, solver="lm-dense")
    return trust_region_loop(problem, config, LmStepEngine(problem, config))
