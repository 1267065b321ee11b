"""Axis-angle rotations: Rodrigues application and its exact derivative.

All functions are vectorized over a leading batch axis where noted. The
rotation vector convention is ``w = theta * k`` with ``theta = ||w||`` and
unit axis ``k``; rotations act as ``R(w) @ x``.
"""

from __future__ import annotations

import numpy as np

# Below this angle the Rodrigues ratios sin(t)/t, (1-cos t)/t^2 are replaced
# by their Taylor limits and the derivative by its w -> 0 limit.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of v, shape (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rotation_matrices(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, (..., 3) rotation vectors -> (..., 3, 3) matrices."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    # sin(t)/t and (1 - cos t)/t^2 with their limits at t = 0
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = skew(w)
    KK = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * KK


def rotate(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply R(w) to points, (..., 3), (..., 3) -> (..., 3)."""
    R = rotation_matrices(w)
    return np.einsum("...ij,...j->...i", R, np.asarray(x, dtype=np.float64))


def rotation_derivative(w: np.ndarray, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Exact derivative d(R(w) x)/dw given the precomputed matrices R(w).

    Closed-form derivative of the exponential map; below SMALL_ANGLE it falls
    back to the w -> 0 limit -[x]_cross (error is O(theta * ||x||)).
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    theta2 = np.sum(w * w, axis=-1)
    Sx = skew(x)
    small = theta2 < SMALL_ANGLE**2
    denom = np.where(small, 1.0, theta2)
    wwT = w[..., :, None] * w[..., None, :]
    Sw = skew(w)
    eye = np.broadcast_to(np.eye(3), R.shape)
    inner = wwT + (np.swapaxes(R, -1, -2) - eye) @ Sw
    J = -(R @ Sx @ inner) / denom[..., None, None]
    if np.any(small):
        J = np.where(small[..., None, None], -Sx, J)
    return J


def rotate_jacobian(w: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotated points and the exact derivative d(R(w) x)/dw."""
    R = rotation_matrices(w)
    rx = np.einsum("...ij,...j->...i", R, np.asarray(x, dtype=np.float64))
    return rx, rotation_derivative(w, x, R)


def canonicalize(w: np.ndarray) -> np.ndarray:
    """Wrap rotation vectors to angle in [0, pi], same rotation."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    out = np.array(w, copy=True)
    over = theta > np.pi
    if np.any(over):
        th = theta[over]
        wrapped = np.mod(th, 2.0 * np.pi)
        flip = wrapped > np.pi
        new = np.where(flip, wrapped - 2.0 * np.pi, wrapped)
        out[over] = w[over] * (new / th)[..., None]
    return out
