"""Pose-free feed-forward Gaussian splatting pieces: canonical scenes, a
differentiable tile rasterizer, two-stage relative pose estimation and the
evaluation protocol around them."""
from .scene import (Camera, CameraIntrinsics, CameraPose, CanonicalScene, GaussianPrimitive,
                    ValidationError, ViewBundle, transform_scene, validate_scene)
from .rasterizer import render, render_with_param_gradients, render_with_pose_gradient
from .metrics import LossConfig, pose_auc, pose_error, psnr, ssim
from .pose import RefineConfig, align_target_pose, coarse_pose_pnp, estimate_relative_pose, \
    refine_pose
from .pnp import DegenerateGeometry, PnPConfig

__version__ = "0.1.0"
