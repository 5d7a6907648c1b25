"""Rotation and rigid-motion helpers.

Quaternions are stored scalar-first, ``(w, x, y, z)``.  Tangent vectors of
SE(3) are ordered ``(translation, rotation)``.
"""
from __future__ import annotations

import numpy as np


def hat(v):
    """Skew-symmetric matrix such that ``hat(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi):
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-5:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return axis / np.linalg.norm(axis) * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * theta / (2.0 * np.sin(theta))


def se3_exp(xi):
    """Exponential of ``xi = (rho, phi)``; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    return so3_exp(phi), V @ rho


def rotation_angle_deg(R):
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def quat_normalize(q):
    """Unit quaternion(s) with non-negative scalar part.

    When the scalar part is zero the first non-zero vector component is made
    positive, so every rotation has exactly one representative.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    q = q / n
    nz = np.abs(q) > 1e-12
    lead = np.take_along_axis(q, np.argmax(nz, axis=-1)[..., None], axis=-1)
    q = np.where(lead < 0, -q, q)
    q[..., 0] = np.where(np.abs(q[..., 0]) <= 1e-12, np.abs(q[..., 0]), q[..., 0])
    return q


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions; input need not be unit."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Shepperd's method; result has ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    d = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(d))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_multiply(a, b):
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat_jacobian(q):
    """d R / d q for unit ``q`` of shape (N, 4); returns (N, 3, 3, 4).

    Derivative of the polynomial map only; normalisation is handled by the
    caller.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    J = np.zeros((q.shape[0], 3, 3, 4))
    # dR/dw
    J[:, 0, 1, 0] = -2 * z; J[:, 0, 2, 0] = 2 * y
    J[:, 1, 0, 0] = 2 * z; J[:, 1, 2, 0] = -2 * x
    J[:, 2, 0, 0] = -2 * y; J[:, 2, 1, 0] = 2 * x
    # dR/dx
    J[:, 0, 1, 1] = 2 * y; J[:, 0, 2, 1] = 2 * z
    J[:, 1, 0, 1] = 2 * y; J[:, 1, 1, 1] = -4 * x; J[:, 1, 2, 1] = -2 * w
    J[:, 2, 0, 1] = 2 * z; J[:, 2, 1, 1] = 2 * w; J[:, 2, 2, 1] = -4 * x
    # dR/dy
    J[:, 0, 0, 2] = -4 * y; J[:, 0, 1, 2] = 2 * x; J[:, 0, 2, 2] = 2 * w
    J[:, 1, 0, 2] = 2 * x; J[:, 1, 2, 2] = 2 * z
    J[:, 2, 0, 2] = -2 * w; J[:, 2, 1, 2] = 2 * z; J[:, 2, 2, 2] = -4 * y
    # dR/dz
    J[:, 0, 0, 3] = -4 * z; J[:, 0, 1, 3] = -2 * w; J[:, 0, 2, 3] = 2 * x
    J[:, 1, 0, 3] = 2 * w; J[:, 1, 1, 3] = -4 * z; J[:, 1, 2, 3] = 2 * y
    J[:, 2, 0, 3] = 2 * x; J[:, 2, 1, 3] = 2 * y
    return J
