"""Raw-parameter activation, pixel unprojection and intrinsic embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import lie, sh
from .scene import CameraPose, CanonicalScene, GaussianPrimitive

IntrinsicKind = Literal["global-add", "global-token", "dense-ray"]
DEFAULT_DENSE_DEGREE = 3


@dataclass(frozen=True)
class RawGaussianParams:
    """Head outputs before activation.

    ``center`` is either a depth scalar or a camera-frame 3-vector.
    """

    center: np.ndarray | float
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray


@dataclass(frozen=True)
class RawGaussianGrid:
    """Per-pixel raw parameters for an H x W view, stored as arrays.

    ``centers`` is (H, W) for depth-parameterised heads or (H, W, 3) when the
    head predicts camera-frame positions directly.
    """

    centers: np.ndarray | None
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray  # (H, W, K, 3)

    @property
    def shape(self):
        return self.opacities.shape


@dataclass(frozen=True)
class IntrinsicFeature:
    kind: str
    payload: np.ndarray


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activate(raw):
    if not (np.all(np.isfinite(raw.rotation)) and np.isfinite(raw.opacity)
            and np.all(np.isfinite(raw.scale)) and np.all(np.isfinite(raw.sh))):
        raise ValueError("raw parameters must be finite")
    if np.linalg.norm(raw.rotation) == 0:
        raise ValueError("zero-norm raw rotation")
    center = np.asarray(raw.center, dtype=np.float64)
    return GaussianPrimitive(
        center=center if center.shape == (3,) else np.zeros(3),
        opacity=float(sigmoid(raw.opacity)),
        rotation=lie.quat_normalize(raw.rotation),
        scale=np.exp(np.asarray(raw.scale, dtype=np.float64)),
        sh=np.asarray(raw.sh, dtype=np.float64),
    )


def pixel_centers(height, width):
    """Continuous coordinates (u, v) of pixel centres, shape (H, W, 2)."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u, v], axis=-1)


def unproject(pixel, depth, intrinsics):
    """Camera-frame point ``depth * K^-1 (u, v, 1)``; broadcasts over pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    pixel = np.asarray(pixel, dtype=np.float64)
    k = intrinsics
    x = (pixel[..., 0] - k.cx) / k.fx
    y = (pixel[..., 1] - k.cy) / k.fy
    return np.stack([x * depth, y * depth, depth * np.ones_like(x)], axis=-1)


def project(points, intrinsics):
    points = np.asarray(points, dtype=np.float64)
    k = intrinsics
    z = points[..., 2]
    return np.stack([k.fx * points[..., 0] / z + k.cx, k.fy * points[..., 1] / z + k.cy], axis=-1)


def pixel_rays(intrinsics):
    """Unit ray directions ``K^-1 p`` through every pixel centre, (H, W, 3)."""
    p = pixel_centers(intrinsics.height, intrinsics.width)
    rays = unproject(p, 1.0, intrinsics)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def lift_view(view, pose_to_canonical, raw, view_index=1):
    """One canonical-frame primitive per pixel of ``view``.

    Centres come from ``raw.centers`` when it holds camera-frame points, or
    from unprojecting ``view.depth`` (falling back to ``raw.centers`` as
    depth) otherwise.  ``pose_to_canonical`` maps view-local coordinates to
    the canonical frame.
    """
    H, W = view.shape
    if raw.shape != (H, W):
        raise ValueError(f"raw grid shape {raw.shape} does not match view shape {(H, W)}")
    if raw.centers is not None and raw.centers.shape == (H, W, 3):
        local = np.asarray(raw.centers, dtype=np.float64)
    else:
        depth = view.depth if view.depth is not None else raw.centers
        if depth is None:
            raise ValueError("depth-parameterised lifting needs view.depth")
        local = unproject(pixel_centers(H, W), depth, view.intrinsics)
    local = local.reshape(-1, 3)
    if np.array_equal(pose_to_canonical.rotation, np.eye(3)) and not np.any(pose_to_canonical.translation):
        centers = local
        rot_q = None
    else:
        centers = pose_to_canonical.apply(local)
        rot_q = lie.rotmat_to_quat(pose_to_canonical.rotation)

    rotations = lie.quat_normalize(raw.rotations.reshape(-1, 4))
    coeffs = np.asarray(raw.sh, dtype=np.float64).reshape(H * W, -1, 3)
    if rot_q is not None:
        rotations = lie.quat_normalize(lie.quat_multiply(rot_q, rotations))
        degree = sh.degree_from_coeffs(coeffs.shape[1])
        if degree > 0:
            M = sh.sh_rotation_matrix(pose_to_canonical.rotation, degree)
            coeffs = np.einsum("jk,nkc->njc", M, coeffs)
    n = H * W
    return CanonicalScene(
        centers=centers,
        opacities=sigmoid(raw.opacities.reshape(-1)),
        rotations=rotations,
        scales=np.exp(raw.scales.reshape(-1, 3)),
        sh=coeffs,
        source_view=np.full(n, view_index, dtype=np.int64),
        source_pixel=np.arange(n, dtype=np.int64),
        num_views=view_index,
        view_shape=(H, W),
    )


def intrinsic_feature_global(k):
    """Resolution-normalised ``(fx/W, fy/H, cx/W, cy/H)``."""
    return np.array([k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / k.height])


def dense_ray_embedding(k, sh_degree=DEFAULT_DENSE_DEGREE):
    if not 0 <= sh_degree <= sh.MAX_DEGREE:
        raise ValueError(f"sh_degree must be in [0, {sh.MAX_DEGREE}]")
    return sh.sh_basis(pixel_rays(k), sh_degree)


def intrinsic_feature(k, kind="global-token", sh_degree=DEFAULT_DENSE_DEGREE):
    if kind in ("global-add", "global-token"):
        return IntrinsicFeature(kind, intrinsic_feature_global(k))
    if kind == "dense-ray":
        return IntrinsicFeature(kind, dense_ray_embedding(k, sh_degree))
    raise ValueError(f"unknown intrinsic embedding kind '{kind}'")
