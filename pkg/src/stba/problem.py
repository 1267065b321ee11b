"""Bundle-problem representation, camera projection model and residuals.

A problem bundles m cameras, n 3D points and q pixel observations forming a
connected bipartite visibility graph. Cameras use the BAL convention:
``P = R(w) X + t``, ``p = -(P_x, P_y) / P_z``, radial factor
``r = 1 + k1 |p|^2 + k2 |p|^4`` and projection ``f * r * p``. Intrinsics
(f, k1, k2) are read from the input but never optimized.

Parameter vector layout: ``x = [c; p]``, camera i in slots [6i, 6i+6) as
(rotation, translation), point j in slots [6m+3j, 6m+3j+3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProjection, InvalidProblem
from .robust import huber_rho
from .rotation import rotate, rotation_matrices

DEPTH_EPS = 1e-12
ROTATION_NORM_SLACK = 1e-9


@dataclass
class Camera:
    """Single camera: axis-angle rotation, translation, frozen intrinsics."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    distortion: np.ndarray  # (k1, k2)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = float(self.focal)
        self.distortion = np.asarray(self.distortion, dtype=np.float64).reshape(2)
        if not self.focal > 0:
            raise InvalidProblem(f"focal must be positive, got {self.focal}")
        if np.linalg.norm(self.rotation) >= np.pi + ROTATION_NORM_SLACK:
            raise InvalidProblem("rotation vector not canonical (norm > pi)")


@dataclass
class IngestReport:
    """What ingest filtering did to the raw input."""

    dropped_points: int = 0
    dropped_observations: int = 0
    dropped_cameras: int = 0
    components_discarded: int = 0


@dataclass
class BundleProblem:
    """Immutable problem instance in structure-of-arrays form.

    Observations are sorted by (point_index, camera_index) and are unique per
    (camera, point) pair. Every camera has at least one observation, every
    point at least two, and the bipartite visibility graph is connected.
    """

    rotations: np.ndarray      # (m, 3)
    translations: np.ndarray   # (m, 3)
    focals: np.ndarray         # (m,)
    distortions: np.ndarray    # (m, 2)
    points: np.ndarray         # (n, 3)
    cam_idx: np.ndarray        # (q,)
    pt_idx: np.ndarray         # (q,)
    pixels: np.ndarray         # (q, 2)
    ingest: IngestReport = field(default_factory=IngestReport)

    def __post_init__(self):
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translations = np.ascontiguousarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.focals = np.ascontiguousarray(self.focals, dtype=np.float64).reshape(-1)
        self.distortions = np.ascontiguousarray(self.distortions, dtype=np.float64).reshape(-1, 2)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.cam_idx = np.ascontiguousarray(self.cam_idx, dtype=np.int64).reshape(-1)
        self.pt_idx = np.ascontiguousarray(self.pt_idx, dtype=np.int64).reshape(-1)
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self._validate()
        for a in (self.rotations, self.translations, self.focals, self.distortions,
                  self.points, self.cam_idx, self.pt_idx, self.pixels):
            a.setflags(write=False)

    # -- basic shape accessors -------------------------------------------------

    @property
    def num_cameras(self) -> int:
        return self.rotations.shape[0]

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def num_observations(self) -> int:
        return self.cam_idx.shape[0]

    def camera(self, i: int) -> Camera:
        return Camera(self.rotations[i], self.translations[i],
                      self.focals[i], self.distortions[i])

    def _validate(self):
        m, n, q = self.num_cameras, self.num_points, self.num_observations
        if m == 0 or n == 0 or q == 0:
            raise InvalidProblem("empty problem")
        if self.translations.shape[0] != m or self.focals.shape[0] != m \
                or self.distortions.shape[0] != m:
            raise InvalidProblem("camera array lengths disagree")
        for name, a in (("rotations", self.rotations), ("translations", self.translations),
                        ("focals", self.focals), ("distortions", self.distortions),
                        ("points", self.points), ("pixels", self.pixels)):
            if not np.all(np.isfinite(a)):
                raise InvalidProblem(f"non-finite values in {name}")
        if np.any(self.focals <= 0):
            raise InvalidProblem("non-positive focal length")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms >= np.pi + ROTATION_NORM_SLACK):
            raise InvalidProblem("non-canonical rotation vector (norm > pi)")
        if self.pt_idx.shape[0] != q or self.pixels.shape[0] != q:
            raise InvalidProblem("observation array lengths disagree")
        if np.any(self.cam_idx < 0) or np.any(self.cam_idx >= m):
            raise InvalidProblem("camera index out of range")
        if np.any(self.pt_idx < 0) or np.any(self.pt_idx >= n):
            raise InvalidProblem("point index out of range")
        key = self.pt_idx * np.int64(m) + self.cam_idx
        if np.any(np.diff(key) <= 0):
            raise InvalidProblem(
                "observations must be sorted by (point, camera) and unique")
        cam_counts = np.bincount(self.cam_idx, minlength=m)
        if np.any(cam_counts < 1):
            raise InvalidProblem("camera without observations")
        pt_counts = np.bincount(self.pt_idx, minlength=n)
        if np.any(pt_counts < 2):
            raise InvalidProblem("point with fewer than two observations")
        if connected_components(m, n, self.cam_idx, self.pt_idx) != 1:
            raise InvalidProblem("visibility graph is not connected")

    # -- parameter vector ------------------------------------------------------

    def pack_params(self) -> np.ndarray:
        """Initial parameter vector x = [c; p]."""
        m, n = self.num_cameras, self.num_points
        x = np.empty(6 * m + 3 * n)
        cams = x[:6 * m].reshape(m, 6)
        cams[:, :3] = self.rotations
        cams[:, 3:] = self.translations
        x[6 * m:] = self.points.ravel()
        return x

    def unpack_params(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views (rotations (m,3), translations (m,3), points (n,3)) of x."""
        m, n = self.num_cameras, self.num_points
        if x.shape != (6 * m + 3 * n,):
            raise ValueError(f"parameter vector must have length {6 * m + 3 * n}")
        cams = x[:6 * m].reshape(m, 6)
        return cams[:, :3], cams[:, 3:], x[6 * m:].reshape(n, 3)

    def with_params(self, x: np.ndarray) -> "BundleProblem":
        """Copy of the problem with camera/point parameters replaced by x."""
        rot, tr, pts = self.unpack_params(x)
        return BundleProblem(rot.copy(), tr.copy(), self.focals.copy(),
                             self.distortions.copy(), pts.copy(),
                             self.cam_idx.copy(), self.pt_idx.copy(),
                             self.pixels.copy())


def connected_components(m: int, n: int, cam_idx: np.ndarray, pt_idx: np.ndarray) -> int:
    """Number of connected components of the bipartite visibility graph."""
    parent = np.arange(m + n)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for c, p in zip(cam_idx, m + pt_idx):
        rc, rp = find(int(c)), find(int(p))
        if rc != rp:
            parent[rp] = rc
    return len({find(i) for i in range(m + n)})


# -- projection and residuals ---------------------------------------------------


def project(camera: Camera, point: np.ndarray) -> np.ndarray:
    """Project a world point, returning pixel coordinates."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    P = rotate(camera.rotation, point) + camera.translation
    if abs(P[2]) < DEPTH_EPS:
        raise DegenerateProjection(f"point depth {P[2]} below {DEPTH_EPS}")
    p = -P[:2] / P[2]
    n2 = p @ p
    k1, k2 = camera.distortion
    return camera.focal * (1.0 + k1 * n2 + k2 * n2 * n2) * p


def residual(camera: Camera, point: np.ndarray, pixel: np.ndarray) -> np.ndarray:
    """Reprojection residual, sign convention projection minus measurement."""
    return project(camera, point) - np.asarray(pixel, dtype=np.float64).reshape(2)


def project_all(problem: BundleProblem, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All projections at parameters x.

    Returns (projections (q, 2), degenerate mask (q,)). Degenerate rows are
    zero-filled; callers decide how to penalize them.
    """
    rot, tr, pts = problem.unpack_params(x)
    R = rotation_matrices(rot)[problem.cam_idx]
    X = pts[problem.pt_idx]
    P = np.einsum("qij,qj->qi", R, X) + tr[problem.cam_idx]
    degenerate = np.abs(P[:, 2]) < DEPTH_EPS
    z = np.where(degenerate, 1.0, P[:, 2])
    p = -P[:, :2] / z[:, None]
    n2 = np.sum(p * p, axis=1)
    k = problem.distortions[problem.cam_idx]
    f = problem.focals[problem.cam_idx]
    scale = f * (1.0 + k[:, 0] * n2 + k[:, 1] * n2 * n2)
    proj = scale[:, None] * p
    proj[degenerate] = 0.0
    return proj, degenerate


def residuals_all(problem: BundleProblem, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (projection minus measurement) plus degenerate mask."""
    proj, degenerate = project_all(problem, x)
    res = proj - problem.pixels
    res[degenerate] = 0.0
    return res, degenerate


def total_cost(problem: BundleProblem, x: np.ndarray, delta: float = np.inf,
               degenerate_penalty: float = 1e8) -> float:
    """Robust total cost: sum of huber_rho(|residual|^2) over observations.

    Degenerate projections contribute `degenerate_penalty` each instead of a
    residual term. The sum is evaluated with numpy's fixed pairwise reduction
    over the sorted observation order, so it is reproducible.
    """
    res, degenerate = residuals_all(problem, x)
    s = np.sum(res * res, axis=1)
    rho, _ = huber_rho(s, delta)
    rho[degenerate] = degenerate_penalty
    return float(np.sum(rho))
