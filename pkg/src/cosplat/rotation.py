"""Quaternion utilities: normalization, rotation matrices, derivatives, slerp.

Quaternions are stored (w, x, y, z). Rotation matrices follow the standard
right-handed convention; for a camera quaternion the matrix maps world
coordinates into the camera frame.
"""

from __future__ import annotations

import numpy as np


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; q may be (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / norm


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N, 3, 3) from unit quaternions (N, 4)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    out[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[:, 0, 1] = 2.0 * (x * y - w * z)
    out[:, 0, 2] = 2.0 * (x * z + w * y)
    out[:, 1, 0] = 2.0 * (x * y + w * z)
    out[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[:, 1, 2] = 2.0 * (y * z - w * x)
    out[:, 2, 0] = 2.0 * (x * z - w * y)
    out[:, 2, 1] = 2.0 * (y * z + w * x)
    out[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation matrix from one unit quaternion (4,)."""
    return rotation_matrices(np.asarray(q, dtype=np.float64)[None, :])[0]


def rotation_matrix_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: shape (N, 4, 3, 3).

    Entry [n, k] is the derivative of the rotation matrix of quaternion n
    with respect to its k-th component (w, x, y, z), *before* accounting for
    the normalization of q.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    jac = np.zeros((n, 4, 3, 3), dtype=np.float64)
    zero = np.zeros_like(w)
    # dR/dw
    jac[:, 0] = np.stack(
        [
            np.stack([zero, -2 * z, 2 * y], axis=-1),
            np.stack([2 * z, zero, -2 * x], axis=-1),
            np.stack([-2 * y, 2 * x, zero], axis=-1),
        ],
        axis=-2,
    )
    # dR/dx
    jac[:, 1] = np.stack(
        [
            np.stack([zero, 2 * y, 2 * z], axis=-1),
            np.stack([2 * y, -4 * x, -2 * w], axis=-1),
            np.stack([2 * z, 2 * w, -4 * x], axis=-1),
        ],
        axis=-2,
    )
    # dR/dy
    jac[:, 2] = np.stack(
        [
            np.stack([-4 * y, 2 * x, 2 * w], axis=-1),
            np.stack([2 * x, zero, 2 * z], axis=-1),
            np.stack([-2 * w, 2 * z, -4 * y], axis=-1),
        ],
        axis=-2,
    )
    # dR/dz
    jac[:, 3] = np.stack(
        [
            np.stack([-4 * z, -2 * w, 2 * x], axis=-1),
            np.stack([2 * w, -4 * z, 2 * y], axis=-1),
            np.stack([2 * x, 2 * y, zero], axis=-1),
        ],
        axis=-2,
    )
    return jac


def normalization_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the unit quaternion back to the raw quaternion."""
    q_raw = np.atleast_2d(np.asarray(q_raw, dtype=np.float64))
    grad_unit = np.atleast_2d(np.asarray(grad_unit, dtype=np.float64))
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q_hat = q_raw / norm
    dot = np.sum(grad_unit * q_hat, axis=-1, keepdims=True)
    return (grad_unit - dot * q_hat) / norm


def slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between two quaternions with sign alignment.

    Falls back to normalized linear interpolation when the rotations are
    nearly identical.
    """
    qa = normalize_quaternions(np.asarray(qa, dtype=np.float64))
    qb = normalize_quaternions(np.asarray(qb, dtype=np.float64))
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-10:
        out = (1.0 - t) * qa + t * qb
        return out / np.linalg.norm(out)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    wa = np.sin((1.0 - t) * theta) / sin_theta
    wb = np.sin(t * theta) / sin_theta
    out = wa * qa + wb * qb
    return out / np.linalg.norm(out)
