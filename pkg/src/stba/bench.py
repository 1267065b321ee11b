"""Benchmark harness: problem perturbation, synthetic scenes and
Dolan-More performance profiles.

Two synthetic layouts cover both covisibility regimes: "ring" (cameras on a
circle looking inward at a central cloud, dense covisibility) and
"grid-street" (forward-moving camera chain with points along a corridor,
sparse chain covisibility). Generated observations are exact projections of
the returned parameters plus optional pixel noise, so the returned problem
carries its own ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InfeasibleSpec
from .problem import BundleProblem
from .rotation import rotation_matrices
from .trace import SolveTrace


@dataclass
class PerturbSpec:
    sigma_points: float = 0.0
    sigma_camera_centers: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.sigma_points < 0 or self.sigma_camera_centers < 0:
            raise ValueError("perturbation sigmas must be >= 0")


def perturb(problem: BundleProblem, spec: PerturbSpec) -> BundleProblem:
    """Gaussian noise on point positions and camera centers.

    Camera centers (-R^T t) are moved and the translation recomputed, keeping
    rotations untouched. Point noise is drawn before camera noise, so results
    are a pure function of (problem, spec).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    points = problem.points + spec.sigma_points * rng.standard_normal(
        problem.points.shape)
    R = rotation_matrices(problem.rotations)
    centers = -np.einsum("mji,mj->mi", R, problem.translations)
    centers = centers + spec.sigma_camera_centers * rng.standard_normal(centers.shape)
    translations = -np.einsum("mij,mj->mi", R, centers)
    return BundleProblem(problem.rotations.copy(), translations,
                         problem.focals.copy(), problem.distortions.copy(),
                         points, problem.cam_idx.copy(), problem.pt_idx.copy(),
                         problem.pixels.copy())


@dataclass
class SyntheticSpec:
    cameras: int
    points: int
    layout: str = "ring"        # ring | grid-street
    views: int = 6              # observing cameras per point
    spread: int | None = None   # camera window a point draws its views from;
                                # None = views (consecutive window), larger
                                # values add long-range covisibility
    pixel_noise: float = 0.0
    seed: int = 0
    focal: float = 1000.0
    scale: float = 1.0          # uniform world scale; projections are scale
                                # invariant, but absolute perturbations bite
                                # harder on smaller scenes

    @property
    def window(self) -> int:
        return self.views if self.spread is None else self.spread

    def validate(self) -> None:
        if self.layout not in ("ring", "grid-street"):
            raise InfeasibleSpec(f"unknown layout {self.layout!r}")
        if self.cameras < 2 or self.points < 4:
            raise InfeasibleSpec("need at least 2 cameras and 4 points")
        if self.views < 2:
            raise InfeasibleSpec("every point needs at least 2 views")
        if self.views > self.cameras:
            raise InfeasibleSpec("views cannot exceed the camera count")
        if not self.views <= self.window <= self.cameras:
            raise InfeasibleSpec("spread must lie in [views, cameras]")
        if self.layout == "ring" and self.points < 2 * self.cameras:
            raise InfeasibleSpec("ring layout needs points >= 2 * cameras")
        if self.layout == "grid-street" and self.points < self.cameras:
            raise InfeasibleSpec("grid-street layout needs points >= cameras")
        if self.pixel_noise < 0:
            raise InfeasibleSpec("pixel noise must be >= 0")
        if not self.scale > 0:
            raise InfeasibleSpec("scale must be positive")


CAMERA_SPACING = 3.0


def generate_synthetic(spec: SyntheticSpec) -> BundleProblem:
    """Build a noiseless-geometry problem; observations get pixel noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.layout == "ring":
        R, centers, X, windows = _ring_scene(spec, rng)
    else:
        R, centers, X, windows = _street_scene(spec, rng)

    centers = centers * spec.scale
    X = X * spec.scale
    translations = -np.einsum("mij,mj->mi", R, centers)
    rotations = Rotation.from_matrix(R).as_rotvec()

    pt_idx = np.repeat(np.arange(spec.points, dtype=np.int64), spec.views)
    cam_idx = windows.reshape(-1)

    P = np.einsum("qij,qj->qi", R[cam_idx], X[pt_idx]) + translations[cam_idx]
    if np.any(P[:, 2] >= -1e-6):
        raise InfeasibleSpec("generated scene has a point behind a camera")
    p = -P[:, :2] / P[:, 2:3]
    pixels = spec.focal * p
    if spec.pixel_noise > 0:
        pixels = pixels + spec.pixel_noise * rng.standard_normal(pixels.shape)

    m = spec.cameras
    order = np.argsort(pt_idx * np.int64(m) + cam_idx, kind="stable")
    return BundleProblem(rotations, translations,
                         np.full(m, spec.focal), np.zeros((m, 2)),
                         X, cam_idx[order], pt_idx[order], pixels[order])


def _ring_scene(spec: SyntheticSpec, rng: np.random.Generator):
    m, n = spec.cameras, spec.points
    radius = max(20.0, CAMERA_SPACING * m / (2.0 * np.pi))
    phi = 2.0 * np.pi * np.arange(m) / m
    centers = radius * np.stack((np.cos(phi), np.sin(phi), np.zeros(m)), axis=1)
    # rows: right, down, backward -- camera looks at the origin
    R = np.zeros((m, 3, 3))
    R[:, 0, 0], R[:, 0, 1] = -np.sin(phi), np.cos(phi)
    R[:, 1, 2] = 1.0
    R[:, 2, 0], R[:, 2, 1] = np.cos(phi), np.sin(phi)

    # stratified azimuths guarantee every camera window is hit for n >= 2m
    alpha = 2.0 * np.pi * (np.arange(n) + rng.random(n)) / n
    rho = radius * rng.uniform(0.05, 0.35, n)
    z = radius * rng.uniform(-0.15, 0.15, n)
    X = np.stack((rho * np.cos(alpha), rho * np.sin(alpha), z), axis=1)

    center_cam = np.floor(alpha * m / (2.0 * np.pi)).astype(np.int64) % m
    consecutive = (center_cam[:, None]
                   + np.arange(spec.views)[None, :]
                   - (spec.views - 1) // 2) % m
    if spec.window == spec.views:
        return R, centers, X, consecutive

    # wide windows: sample each point's views from `window` cameras around its
    # azimuth; a stratified subset keeps consecutive windows so that every
    # camera is guaranteed at least one observation
    windows = np.empty((n, spec.views), dtype=np.int64)
    stride = max(1, n // (2 * m))
    keep = np.zeros(n, dtype=bool)
    keep[::stride] = True
    windows[keep] = consecutive[keep]
    idx = np.flatnonzero(~keep)
    if idx.size:
        offsets = np.argsort(rng.random((idx.size, spec.window)),
                             axis=1)[:, :spec.views]
        offsets -= (spec.window - 1) // 2
        windows[idx] = (center_cam[idx, None] + offsets) % m
    return R, centers, X, windows


def _street_scene(spec: SyntheticSpec, rng: np.random.Generator):
    m, n = spec.cameras, spec.points
    s = CAMERA_SPACING
    centers = np.stack((s * np.arange(m), np.zeros(m), np.full(m, 1.5)), axis=1)
    # constant look-forward (+x) rotation
    R0 = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
    R = np.broadcast_to(R0, (m, 3, 3)).copy()

    # farthest observing camera index per point; first points stratified so
    # every camera observes something
    n_strat = m - spec.views + 1
    i_far = np.concatenate((
        np.arange(spec.views - 1, m),
        rng.integers(spec.views - 1, m, size=n - n_strat),
    ))
    x = s * (i_far + 2.0 + rng.random(n))
    y = rng.uniform(2.0, 10.0, n) * np.where(rng.random(n) < 0.5, -1.0, 1.0)
    z = rng.uniform(0.0, 4.0, n)
    X = np.stack((x, y, z), axis=1)

    consecutive = i_far[:, None] + np.arange(spec.views)[None, :] - (spec.views - 1)
    if spec.window == spec.views:
        return R, centers, X, consecutive

    # wide windows: sample views distinct cameras from the stretch behind the
    # point; the stratified prefix keeps consecutive windows, covering every
    # camera deterministically
    windows = np.empty((n, spec.views), dtype=np.int64)
    windows[:n_strat] = consecutive[:n_strat]
    lo = np.maximum(i_far - spec.window + 1, 0)
    width = i_far - lo + 1       # >= views because i_far >= views - 1
    for w in np.unique(width[n_strat:]):
        rows = np.flatnonzero((width == w) & (np.arange(n) >= n_strat))
        offsets = np.argsort(rng.random((rows.size, w)), axis=1)[:, :spec.views]
        windows[rows] = lo[rows, None] + offsets
    return R, centers, X, windows


# -- performance profiles ---------------------------------------------------


@dataclass
class CostCurve:
    """Best-so-far cost against cumulative wall clock for one solve."""

    times_ms: np.ndarray
    best_costs: np.ndarray
    initial_cost: float

    @classmethod
    def from_trace(cls, trace: SolveTrace) -> "CostCurve":
        times, best = [], []
        current = trace.initial_cost
        acc = 0.0
        for r in trace.records:
            acc += r.t_iter_ms
            if r.accepted and r.cost_after < current:
                current = r.cost_after
            times.append(acc)
            best.append(current)
        return cls(np.asarray(times), np.asarray(best), trace.initial_cost)

    @property
    def final_cost(self) -> float:
        return float(self.best_costs[-1]) if self.best_costs.size else self.initial_cost

    def time_to(self, threshold: float) -> float:
        """First cumulative time at which the cost is <= threshold (inf if never)."""
        if self.initial_cost <= threshold:
            return 0.0
        hits = np.flatnonzero(self.best_costs <= threshold)
        return float(self.times_ms[hits[0]]) if hits.size else np.inf


@dataclass
class ProfileInput:
    """Per (problem, solver) cost curves of one bake-off."""

    problems: list[str]
    solvers: list[str]
    curves: dict = field(default_factory=dict)   # (problem, solver) -> CostCurve

    def add(self, problem: str, solver: str, curve: CostCurve) -> None:
        self.curves[(problem, solver)] = curve

    def validate(self) -> None:
        for p in self.problems:
            f0 = {s: self.curves[(p, s)].initial_cost for s in self.solvers
                  if (p, s) in self.curves}
            if len(f0) != len(self.solvers):
                raise ValueError(f"missing curves for problem {p!r}")
            vals = list(f0.values())
            if max(vals) - min(vals) > 1e-6 * max(1.0, abs(vals[0])):
                raise ValueError(f"solvers disagree on the initial cost of {p!r}")


def threshold_cost(f0: float, fstar: float, tau: float) -> float:
    """Objective threshold F_tau = F* + tau (F0 - F*)."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return fstar + tau * (f0 - fstar)


def times_to_threshold(inputs: ProfileInput, tau: float) -> dict:
    """T_tau(p, s): wall-clock to bring the cost under F_tau(p)."""
    out = {}
    for p in inputs.problems:
        fstar = min(inputs.curves[(p, s)].final_cost for s in inputs.solvers)
        f0 = inputs.curves[(p, inputs.solvers[0])].initial_cost
        f_tau = threshold_cost(f0, fstar, tau)
        for s in inputs.solvers:
            out[(p, s)] = inputs.curves[(p, s)].time_to(f_tau)
    return out


def performance_profile(inputs: ProfileInput, tau: float,
                        alphas) -> dict[str, np.ndarray]:
    """rho(s, alpha): percentage of problems solved within alpha times the
    fastest solver's time. Solvers that never reach F_tau count as unsolved
    for every alpha."""
    inputs.validate()
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas < 1.0):
        raise ValueError("alphas must be >= 1")
    T = times_to_threshold(inputs, tau)
    n_problems = len(inputs.problems)
    out = {}
    for s in inputs.solvers:
        solved = np.zeros(len(alphas), dtype=np.int64)
        for p in inputs.problems:
            t = T[(p, s)]
            tmin = min(T[(p, s2)] for s2 in inputs.solvers)
            if np.isfinite(t):
                solved += t <= alphas * tmin
        out[s] = 100.0 * solved / n_problems
    return out


def profile_rows(inputs: ProfileInput, taus, alphas) -> list[tuple]:
    """Flat (solver, tau, alpha, rho) rows for CSV export."""
    rows = []
    for tau in taus:
        table = performance_profile(inputs, tau, alphas)
        for s in inputs.solvers:
            for a, r in zip(alphas, table[s]):
                rows.append((s, tau, a, r))
    return rows
