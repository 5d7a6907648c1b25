"""Perspective-n-point: Grunert P3P inside RANSAC, then Gauss-Newton refit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .scene import CameraPose


class DegenerateGeometry(RuntimeError):
    pass


@dataclass(frozen=True)
class PnPConfig:
    ransac_iterations: int = 2048
    reprojection_threshold: float = 1.5
    min_inliers: int = 6
    sample_size: int = 4
    seed: int = 0
    # adaptive early stop; ransac_iterations stays the hard cap
    confidence: float = 0.999

    def __post_init__(self):
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be >= 1")
        if self.reprojection_threshold <= 0:
            raise ValueError("reprojection_threshold must be positive")
        if self.sample_size < 4:
            raise ValueError("sample_size must be >= 4 (three for P3P, one to disambiguate)")


def bearings(pixels, K):
    h = np.c_[pixels, np.ones(len(pixels))] @ np.linalg.inv(K).T
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def kabsch(src, dst):
    """Rigid ``(R, t)`` minimising ``|R src + t - dst|``."""
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def p3p_grunert(X, f):
    """All poses consistent with three world points ``X`` and unit bearings ``f``.

    Returns a list of ``(R, t)`` world-to-camera solutions (up to four).
    """
    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    if min(a, b, c) < 1e-9:
        return []
    ca = f[1] @ f[2]
    cb = f[0] @ f[2]
    cg = f[0] @ f[1]
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg
    roots = np.roots([A4, A3, A2, A1, A0])
    out = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1_sq = c2 / (1 + u * u - 2 * u * cg)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        P = np.array([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        out.append(kabsch(X, P))
    return out


def reprojection_errors(R, t, X, pixels, K):
    P = X @ R.T + t
    z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (P @ K.T)[:, :2] / z[:, None]
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 1e-9, err, np.inf)


def refine_reprojection(R, t, X, pixels, K, iterations=20):
    """Gauss-Newton on the left-perturbed SE(3) tangent."""
    fx, fy = K[0, 0], K[1, 1]
    pose = CameraPose(R, t)
    for _ in range(iterations):
        P = pose.apply(X)
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        uv = np.stack([fx * x / z + K[0, 2], fy * y / z + K[1, 2]], 1)
        r = (uv - pixels).ravel()
        Jp = np.zeros((len(X), 2, 3))
        Jp[:, 0, 0] = fx / z
        Jp[:, 0, 2] = -fx * x / z**2
        Jp[:, 1, 1] = fy / z
        Jp[:, 1, 2] = -fy * y / z**2
        # dP/dxi = [I | -hat(P)]
        dP = np.zeros((len(X), 3, 6))
        dP[:, :, :3] = np.eye(3)
        dP[:, 0, 4], dP[:, 0, 5] = P[:, 2], -P[:, 1]
        dP[:, 1, 3], dP[:, 1, 5] = -P[:, 2], P[:, 0]
        dP[:, 2, 3], dP[:, 2, 4] = P[:, 1], -P[:, 0]
        Jr = (Jp @ dP).reshape(-1, 6)
        H = Jr.T @ Jr + 1e-9 * np.eye(6)
        step = -np.linalg.solve(H, Jr.T @ r)
        pose = pose.retract(step)
        if np.linalg.norm(step) < 1e-12:
            break
    return pose


def _is_degenerate(X):
    if len(X) < 4:
        return True
    C = X - X.mean(0)
    sv = np.linalg.svd(C, compute_uv=False)
    # collinear: second singular value vanishes relative to the first
    return sv[0] == 0 or sv[1] / sv[0] < 1e-6


def _required_iterations(inlier_ratio, cfg):
    if cfg.confidence >= 1.0:
        return cfg.ransac_iterations
    p_good = inlier_ratio ** cfg.sample_size
    if p_good <= 0:
        return cfg.ransac_iterations
    if p_good >= 1:
        return 1
    return int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - p_good)))


def solve_pnp_ransac(X, pixels, K, cfg=PnPConfig()):
    """Robust pose from 3D points ``X`` and their pixel observations.

    Returns ``(CameraPose, inlier_mask)``.
    """
    X = np.asarray(X, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(X)
    if n < max(6, cfg.sample_size):
        raise DegenerateGeometry(f"insufficient correspondences: {n}")
    if _is_degenerate(X):
        raise DegenerateGeometry("degenerate geometry: 3D points are collinear")
    f = bearings(pixels, K)
    rng = np.random.default_rng(cfg.seed)
    best_count, best = -1, None
    budget = cfg.ransac_iterations
    it = 0
    while it < budget:
        it += 1
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        candidates = p3p_grunert(X[sample[:3]], f[sample[:3]])
        if not candidates:
            continue
        # the remaining sample points pick among the P3P roots
        check = sample[3:]
        scores = [reprojection_errors(R, t, X[check], pixels[check], K).max()
                  for R, t in candidates]
        R, t = candidates[int(np.argmin(scores))]
        if min(scores) > cfg.reprojection_threshold:
            continue
        inliers = reprojection_errors(R, t, X, pixels, K) < cfg.reprojection_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best = count, (R, t, inliers)
            if count == n:
                break
            budget = min(budget, _required_iterations(count / n, cfg))
    if best is None or best_count < cfg.min_inliers:
        raise DegenerateGeometry(f"degenerate geometry: {max(best_count, 0)} inliers "
                                 f"(< {cfg.min_inliers})")
    R, t, inliers = best
    pose = refine_reprojection(R, t, X[inliers], pixels[inliers], K)
    # one re-selection pass with the refined pose
    inliers2 = reprojection_errors(pose.rotation, pose.translation, X, pixels, K) \
        < cfg.reprojection_threshold
    if inliers2.sum() >= inliers.sum():
        pose = refine_reprojection(pose.rotation, pose.translation, X[inliers2],
                                   pixels[inliers2], K)
        inliers = inliers2
    return pose, inliers
