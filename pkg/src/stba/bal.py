"""BAL text format reader and writer.

Layout: header "m n q"; q observation lines "cam_idx pt_idx u v"; 9 numbers
per camera (3 rotation, 3 translation, focal, k1, k2); 3 numbers per point.
The reader tokenizes the whole file, so any whitespace layout is accepted.
The writer emits 17 significant digits, which round-trips doubles exactly.

Ingest filtering: rotations are wrapped to the canonical range, points seen
by fewer than two cameras are dropped (and cameras left without observations,
iterated to a fixpoint); a disconnected visibility graph is rejected unless
`keep_largest_component` is set.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BalParseError, InvalidProblem
from .problem import BundleProblem, IngestReport
from .rotation import canonicalize


def read_bal(path, keep_largest_component: bool = False) -> BundleProblem:
    """Parse a BAL file into a validated problem."""
    text = Path(path).read_text()
    tokens = text.split()
    pos = 0

    def take(count: int, kind, what: str) -> list:
        nonlocal pos
        if pos + count > len(tokens):
            raise BalParseError(f"truncated file while reading {what}")
        out = tokens[pos:pos + count]
        pos += count
        try:
            return [kind(t) for t in out]
        except ValueError as exc:
            raise BalParseError(f"bad {what}: {exc}") from None

    m, n, q = take(3, int, "header")
    if m <= 0 or n <= 0 or q <= 0:
        raise BalParseError(f"non-positive sizes in header: {m} {n} {q}")

    obs = np.empty((q, 4))
    for i in range(q):
        cam, pt, u, v = take(4, float, f"observation {i}")
        obs[i] = (cam, pt, u, v)
    cam_idx = obs[:, 0].astype(np.int64)
    pt_idx = obs[:, 1].astype(np.int64)
    if np.any(obs[:, 0] != cam_idx) or np.any(obs[:, 1] != pt_idx):
        raise BalParseError("non-integer observation indices")
    pixels = obs[:, 2:4]

    cams = np.array(take(9 * m, float, "camera parameters")).reshape(m, 9)
    points = np.array(take(3 * n, float, "points")).reshape(n, 3)
    if pos != len(tokens):
        raise BalParseError(f"{len(tokens) - pos} trailing tokens")

    if np.any(cam_idx < 0) or np.any(cam_idx >= m):
        raise InvalidProblem("camera index out of range")
    if np.any(pt_idx < 0) or np.any(pt_idx >= n):
        raise InvalidProblem("point index out of range")

    return build_problem(canonicalize(cams[:, 0:3]), cams[:, 3:6], cams[:, 6],
                         cams[:, 7:9], points, cam_idx, pt_idx, pixels,
                         keep_largest_component=keep_largest_component)


def build_problem(rotations, translations, focals, distortions, points,
                  cam_idx, pt_idx, pixels,
                  keep_largest_component: bool = False) -> BundleProblem:
    """Apply ingest filtering, then construct a validated problem."""
    report = IngestReport()
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    pt_idx = np.asarray(pt_idx, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    m, n = len(focals), len(points)

    key = pt_idx * np.int64(m) + cam_idx
    order = np.argsort(key, kind="stable")
    if np.any(np.diff(key[order]) == 0):
        raise InvalidProblem("duplicate (camera, point) observation")
    cam_idx, pt_idx, pixels = cam_idx[order], pt_idx[order], pixels[order]

    keep_cam = np.ones(m, dtype=bool)
    keep_pt = np.ones(n, dtype=bool)
    while True:
        pt_counts = np.bincount(pt_idx, minlength=n)
        bad_pt = keep_pt & (pt_counts < 2)
        cam_counts = np.bincount(cam_idx, minlength=m)
        bad_cam = keep_cam & (cam_counts < 1)
        if not bad_pt.any() and not bad_cam.any():
            break
        report.dropped_points += int(bad_pt.sum())
        report.dropped_cameras += int(bad_cam.sum())
        keep_pt &= ~bad_pt
        keep_cam &= ~bad_cam
        keep_obs = keep_pt[pt_idx] & keep_cam[cam_idx]
        report.dropped_observations += int((~keep_obs).sum())
        cam_idx, pt_idx, pixels = cam_idx[keep_obs], pt_idx[keep_obs], pixels[keep_obs]
        if cam_idx.size == 0:
            raise InvalidProblem("ingest filtering removed every observation")

    labels = _component_labels(m, n, cam_idx, pt_idx, keep_cam, keep_pt)
    live = np.concatenate((keep_cam, keep_pt))
    n_components = len(np.unique(labels[live])) if live.any() else 0
    if n_components > 1:
        if not keep_largest_component:
            raise InvalidProblem(
                f"visibility graph has {n_components} connected components")
        counts = np.bincount(labels[live])
        main = int(np.argmax(counts))
        report.components_discarded = n_components - 1
        drop_cam = keep_cam & (labels[:m] != main)
        drop_pt = keep_pt & (labels[m:] != main)
        report.dropped_cameras += int(drop_cam.sum())
        report.dropped_points += int(drop_pt.sum())
        keep_cam &= ~drop_cam
        keep_pt &= ~drop_pt
        keep_obs = keep_pt[pt_idx] & keep_cam[cam_idx]
        report.dropped_observations += int((~keep_obs).sum())
        cam_idx, pt_idx, pixels = cam_idx[keep_obs], pt_idx[keep_obs], pixels[keep_obs]

    new_cam = np.cumsum(keep_cam) - 1
    new_pt = np.cumsum(keep_pt) - 1
    problem = BundleProblem(
        np.asarray(rotations, dtype=np.float64)[keep_cam],
        np.asarray(translations, dtype=np.float64)[keep_cam],
        np.asarray(focals, dtype=np.float64)[keep_cam],
        np.asarray(distortions, dtype=np.float64)[keep_cam],
        np.asarray(points, dtype=np.float64)[keep_pt],
        new_cam[cam_idx], new_pt[pt_idx], pixels,
        ingest=report)
    return problem


def _component_labels(m, n, cam_idx, pt_idx, keep_cam, keep_pt) -> np.ndarray:
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
    return np.array([find(i) for i in range(m + n)])


def format_g17(x: float) -> str:
    return f"{x:.17g}"


def write_bal(problem: BundleProblem, path) -> None:
    """Serialize with 17 significant digits per number."""
    g = format_g17
    lines = [f"{problem.num_cameras} {problem.num_points} {problem.num_observations}"]
    for c, p, px in zip(problem.cam_idx, problem.pt_idx, problem.pixels):
        lines.append(f"{c} {p} {g(px[0])} {g(px[1])}")
    for i in range(problem.num_cameras):
        row = np.concatenate((problem.rotations[i], problem.translations[i],
                              [problem.focals[i]], problem.distortions[i]))
        lines.append(" ".join(g(x) for x in row))
    for pt in problem.points:
        lines.append(" ".join(g(x) for x in pt))
    Path(path).write_text("\n".join(lines) + "\n")


def write_bal_params(problem: BundleProblem, x: np.ndarray, path) -> None:
    """Serialize the problem with its parameters replaced by x.

    Rotation vectors are wrapped back to the canonical range first; the
    optimizer lets them grow freely, but the file format stores canonical
    axis-angle.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    m = problem.num_cameras
    cams = x[:6 * m].reshape(m, 6)
    cams[:, :3] = canonicalize(cams[:, :3])
    write_bal(problem.with_params(x), path)
