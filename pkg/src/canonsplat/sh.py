"""Real spherical harmonics up to degree 3.

Basis order and sign convention follow the 3DGS ecosystem so that
coefficients read from third-party PLY files evaluate to the same colours.
"""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_coeffs(degree):
    return (degree + 1) ** 2


def degree_from_coeffs(k):
    for deg in range(MAX_DEGREE + 1):
        if num_coeffs(deg) == k:
            return deg
    raise ValueError(f"{k} coefficients do not match any SH degree <= {MAX_DEGREE}")


def sh_basis(dirs, degree):
    """Evaluate the basis at unit directions ``dirs`` (..., 3) -> (..., K)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy),
                C3[1] * x * y * z,
                C3[2] * y * (4 * zz - xx - yy),
                C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                C3[4] * x * (4 * zz - xx - yy),
                C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree):
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z).

    Returns (..., K, 3).  These are derivatives of the polynomial extension
    off the sphere; chain through direction normalisation separately.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def sh_rotation_matrix(R, degree):
    """Matrix ``M`` with ``coeffs' = M @ coeffs`` for a frame rotated by ``R``.

    The rotated coefficients satisfy ``f'(d) = f(R^T d)``.  Each band is
    closed under rotation, so a least-squares fit over a dense set of
    directions recovers the block-diagonal Wigner matrix to round-off.
    """
    K = num_coeffs(degree)
    if degree == 0:
        return np.eye(1)
    d = _fibonacci_sphere(128)
    A = sh_basis(d, degree)
    B = sh_basis(d @ np.asarray(R), degree)  # rows are R^T d
    X, *_ = np.linalg.lstsq(A, B, rcond=None)
    M = X
    # zero the numerically-empty cross-band blocks
    mask = np.zeros((K, K), dtype=bool)
    for l in range(degree + 1):
        sl = slice(l * l, (l + 1) ** 2)
        mask[sl, sl] = True
    return np.where(mask, M, 0.0)
