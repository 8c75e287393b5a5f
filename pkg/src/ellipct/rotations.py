"""Quaternion helpers (w, x, y, z convention)."""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q| for a single quaternion or an (N, 4) batch."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s); accepts (4,) or (N, 4), normalizes internally."""
    q = quat_normalize(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """d R / d q_hat for unit quaternion(s): shape (..., 4, 3, 3).

    The derivative is taken at the *normalized* quaternion; combine with
    `normalization_jacobian` to differentiate through raw storage.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    J = np.zeros((n, 4, 3, 3), dtype=np.float64)
    zero = np.zeros_like(w)
    J[:, 0] = np.stack(
        [zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], axis=-1
    ).reshape(n, 3, 3)
    J[:, 1] = np.stack(
        [zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=-1
    ).reshape(n, 3, 3)
    J[:, 2] = np.stack(
        [-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], axis=-1
    ).reshape(n, 3, 3)
    J[:, 3] = np.stack(
        [-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], axis=-1
    ).reshape(n, 3, 3)
    return J


def normalization_jacobian(q: np.ndarray) -> np.ndarray:
    """d(q/|q|)/dq for quaternion(s): (..., 4, 4)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    eye = np.eye(4)[None, :, :]
    return (eye - qh[:, :, None] * qh[:, None, :]) / norm[:, :, None]


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, 4) uniformly distributed unit quaternions."""
    q = rng.normal(size=(n, 4))
    return quat_normalize(q)
