"""Relative pose estimation against a frozen canonical scene.

Stage one solves PnP between a view's pixels and the canonical centres of
its own pixel-aligned Gaussians.  Stage two renders the scene and descends
the photometric loss on the SE(3) tangent using the analytic camera
Jacobian from the rasterizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie, metrics
from .lifting import pixel_centers
from .metrics import LossConfig
from .pnp import DegenerateGeometry, PnPConfig, solve_pnp_ransac
from .rasterizer import pose_loss_and_gradient, render
from .scene import Camera, CameraPose

__all__ = ["DegenerateGeometry", "PnPConfig", "RefineConfig", "RefineResult", "PoseEstimate",
           "coarse_pose_pnp", "refine_pose", "align_target_pose", "estimate_relative_pose"]


def _refine_loss():
    return LossConfig(mse_weight=1.0, perceptual_weight=0.05, ssim_structural_weight=0.2)


@dataclass(frozen=True)
class RefineConfig:
    steps: int = 200
    learning_rate: float = 5e-3
    loss: LossConfig = field(default_factory=_refine_loss)
    convergence_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    background: tuple = (0.0, 0.0, 0.0)
    # learning rate decays geometrically to this fraction by the last step
    final_lr_fraction: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class RefineResult:
    pose: object
    losses: list
    best_loss: float
    steps_run: int


@dataclass
class PoseEstimate:
    pose: object
    stage: str
    inliers: int = 0
    steps_run: int = 0


def coarse_pose_pnp(scene, query_view, intrinsics, cfg=PnPConfig()):
    """Canonical-to-camera pose of ``query_view`` (1-based) from its own Gaussians.

    Returns ``(CameraPose, inlier_count)``.
    """
    mask = scene.source_view == query_view
    if mask.sum() < 6:
        raise DegenerateGeometry(f"insufficient correspondences: {int(mask.sum())} "
                                 f"primitives from view {query_view}")
    H, W = scene.view_shape
    if H * W == 0:
        H, W = intrinsics.height, intrinsics.width
    pix = pixel_centers(H, W).reshape(-1, 2)[scene.source_pixel[mask]]
    pose, inliers = solve_pnp_ransac(scene.centers[mask], pix, intrinsics.K, cfg)
    return pose, int(inliers.sum())


def _loss_and_grad(scene, cam, target, cfg):
    _, loss, g_xi = pose_loss_and_gradient(
        scene, cam, lambda img: metrics.reconstruction_loss(img, target, cfg.loss), cfg.background)
    return loss, g_xi


def photometric_loss(scene, intrinsics, pose, target, cfg=RefineConfig()):
    img = render(scene, Camera(intrinsics, pose), cfg.background).color
    return metrics.reconstruction_loss(img, target, cfg.loss, with_grad=False)[0]


def _pivot(scene, pose):
    """Camera-frame point on the optical axis at the scene's median depth."""
    z = pose.apply(scene.centers)[:, 2]
    z = z[z > 0]
    return np.array([0.0, 0.0, float(np.median(z)) if len(z) else 1.0])


def _pivot_step(pose, delta, c):
    # rotate about c in the camera frame, then translate
    R = lie.so3_exp(delta[3:])
    return CameraPose(R, c - R @ c + delta[:3]).compose(pose)


def refine_pose(scene, target_image, intrinsics, init, cfg=RefineConfig()):
    """Adam on the pose tangent with the scene frozen.

    Rotations pivot about a point at the scene's median depth rather than
    the camera centre, which decouples rotation from sideways translation.
    Returns the lowest-loss pose seen (the initial pose included).
    """
    target = np.asarray(target_image, dtype=np.float64)
    if cfg.steps == 0:
        return RefineResult(init, [], float("nan"), 0)
    c = _pivot(scene, init)
    pose = init
    m = np.zeros(6)
    v = np.zeros(6)
    losses = []
    best_pose, best_loss = init, np.inf
    steps_run = 0
    for step in range(1, cfg.steps + 1):
        loss, g = _loss_and_grad(scene, Camera(intrinsics, pose), target, cfg)
        g = np.concatenate([g[:3], g[3:] - np.cross(c, g[:3])])
        losses.append(loss)
        if loss < best_loss:
            best_pose, best_loss = pose, loss
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**step)
        v_hat = v / (1 - cfg.beta2**step)
        lr = cfg.learning_rate * cfg.final_lr_fraction ** ((step - 1) / max(cfg.steps - 1, 1))
        delta = -lr * m_hat / (np.sqrt(v_hat) + 1e-12)
        pose = _pivot_step(pose, delta, c)
        steps_run = step
        if np.linalg.norm(delta) < cfg.convergence_eps:
            break
    final = photometric_loss(scene, intrinsics, pose, target, cfg)
    losses.append(final)
    if final < best_loss:
        best_pose, best_loss = pose, final
    return RefineResult(best_pose, losses, float(best_loss), steps_run)


def align_target_pose(scene, target_image, intrinsics, init, cfg=RefineConfig()):
    """Evaluation-time alignment of a target camera before scoring.

    ``init`` may be a single pose or a sequence of candidates (e.g. the
    dataset pose and a coarse estimate).  Every candidate is refined and the
    one reaching the lowest photometric loss wins, ties going to the earlier
    candidate.  If the winner renders the target with a higher MSE than the
    best unrefined candidate, that candidate is returned instead (with zero
    steps), so alignment never lowers target PSNR.
    Returns ``(CameraPose, RefineResult)``.
    """
    target = np.asarray(target_image, dtype=np.float64)
    inits = list(init) if isinstance(init, (list, tuple)) else [init]

    def image_mse(pose_):
        return metrics.mse(render(scene, Camera(intrinsics, pose_), cfg.background).color, target)

    best = None
    for cand in inits:
        res = refine_pose(scene, target, intrinsics, cand, cfg)
        if best is None or res.best_loss < best.best_loss:
            best = res
    errs = [image_mse(c) for c in inits]
    i = int(np.argmin(errs))
    if image_mse(best.pose) > errs[i]:
        loss = photometric_loss(scene, intrinsics, inits[i], target, cfg)
        best = RefineResult(inits[i], best.losses, float(loss), 0)
    return best.pose, best


def estimate_relative_pose(scene, target_image, intrinsics, query_view=2,
                           pnp_cfg=PnPConfig(), refine_cfg=RefineConfig(), refine=True):
    """Two-stage estimate; returns the list of stage records (pnp, then refined)."""
    pose, inliers = coarse_pose_pnp(scene, query_view, intrinsics, pnp_cfg)
    out = [PoseEstimate(pose, "pnp", inliers, 0)]
    if refine:
        res = refine_pose(scene, target_image, intrinsics, pose, refine_cfg)
        out.append(PoseEstimate(res.pose, "refined", inliers, res.steps_run))
    return out
