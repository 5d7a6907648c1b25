"""Views-to-Gaussians predictors.

A predictor maps V unposed views (image + intrinsics) to a canonical
scene: V*H*W pixel-aligned primitives expressed in view 1's camera frame.
The neural network is out of scope here; the oracle predictors below use
ground-truth depth and poses to stand in for it, and realise both the
canonical pipeline and the older transform-then-fuse pipeline.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np

from . import lie, ply
from .lifting import RawGaussianGrid, intrinsic_feature, lift_view
from .scene import CameraPose, CanonicalScene, transform_scene
from .sh import C0


class PredictorError(ValueError):
    pass


def _check_views(views, need_oracle=False):
    if len(views) < 2:
        raise PredictorError(f"need at least 2 views, got {len(views)}")
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise PredictorError(f"views have mismatched shapes: {sorted(shapes)}")
    if need_oracle:
        for i, v in enumerate(views, 1):
            if v.depth is None:
                raise PredictorError(f"view {i} has no depth")
            if v.pose is None:
                raise PredictorError(f"view {i} has no pose")


class GaussianPredictor(ABC):
    """Interface: ``predict(views, intrinsic_mode) -> CanonicalScene``."""

    @abstractmethod
    def predict(self, views, intrinsic_mode="global-token"):
        ...


@dataclass(frozen=True)
class OracleSettings:
    opacity: float = 0.9
    # isotropic world scale = footprint * depth / fx, a constant screen-space size
    footprint: float = 0.6


def _oracle_raw(view, settings):
    H, W = view.shape
    logit = np.log(settings.opacity) - np.log1p(-settings.opacity)
    scale = view.depth / view.intrinsics.fx * settings.footprint
    return RawGaussianGrid(
        centers=None,
        opacities=np.full((H, W), logit),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (H, W, 1)),
        scales=np.repeat(np.log(scale)[..., None], 3, axis=-1),
        sh=((view.image - 0.5) / C0)[:, :, None, :],
    )


def _relative_to_first(views):
    """Per-view local-to-canonical transforms (view 1 becomes the identity)."""
    anchor = views[0].pose
    out = []
    for v in views:
        out.append(anchor.compose(v.pose.inverse()))
    out[0] = CameraPose.identity()
    return out


class OracleCanonicalPredictor(GaussianPredictor):
    """Lifts each view straight into view 1's frame with ground-truth depth and pose."""

    name = "oracle-canonical"

    def __init__(self, settings=OracleSettings()):
        self.settings = settings

    def predict(self, views, intrinsic_mode="global-token"):
        _check_views(views, need_oracle=True)
        # computed for interface parity; the oracle does not consume it
        for v in views:
            intrinsic_feature(v.intrinsics, intrinsic_mode)
        parts = []
        for i, (v, to_canon) in enumerate(zip(views, _relative_to_first(views)), 1):
            parts.append(lift_view(v, to_canon, _oracle_raw(v, self.settings), view_index=i))
        return CanonicalScene.concatenate(parts, num_views=len(views))


@dataclass(frozen=True)
class PoseNoise:
    rotation_deg: float = 0.0
    translation_frac: float = 0.0
    seed: int = 0


def noisy_transform(pose, noise, rng):
    """``pose`` left-multiplied by a rotation of exactly ``noise.rotation_deg``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = lie.so3_exp(np.radians(noise.rotation_deg) * axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    scale = max(np.linalg.norm(pose.translation), 1e-3)
    return CameraPose(R @ pose.rotation,
                      R @ pose.translation + noise.translation_frac * scale * d)


class TransformThenFusePredictor(GaussianPredictor):
    """Baseline: lift per view in its own frame, transform by (noisy) poses, concatenate."""

    name = "oracle-transform-fuse"

    def __init__(self, pose_noise=PoseNoise(), settings=OracleSettings()):
        self.pose_noise = pose_noise
        self.settings = settings

    def predict(self, views, intrinsic_mode="global-token"):
        _check_views(views, need_oracle=True)
        rng = np.random.default_rng(self.pose_noise.seed)
        parts = []
        for i, (v, to_canon) in enumerate(zip(views, _relative_to_first(views)), 1):
            local = lift_view(v, CameraPose.identity(), _oracle_raw(v, self.settings), view_index=i)
            if i > 1 and (self.pose_noise.rotation_deg or self.pose_noise.translation_frac):
                to_canon = noisy_transform(to_canon, self.pose_noise, rng)
            parts.append(transform_scene(local, to_canon))
        return CanonicalScene.concatenate(parts, num_views=len(views))


class FilePredictor(GaussianPredictor):
    """Returns a stored scene regardless of the views."""

    def __init__(self, path):
        self.path = path
        self.name = f"from-file:{path}"

    def predict(self, views=(), intrinsic_mode="global-token"):
        return ply.read_scene(self.path)


def oracle_canonical_predict(views, settings=OracleSettings()):
    return OracleCanonicalPredictor(settings).predict(views)


def transform_then_fuse_predict(views, pose_noise=PoseNoise(), settings=OracleSettings()):
    return TransformThenFusePredictor(pose_noise, settings).predict(views)


def predictor_from_name(name, pose_noise=PoseNoise()):
    if name == "oracle-canonical":
        return OracleCanonicalPredictor()
    if name == "oracle-transform-fuse":
        return TransformThenFusePredictor(pose_noise)
    if name.startswith("from-file:"):
        return FilePredictor(name[len("from-file:"):])
    raise PredictorError(f"unknown predictor '{name}'")


def perturb_centers(scene, sigma_rel, seed):
    """Jitter centres by Gaussian noise proportional to their distance from the origin.

    Stands in for an imperfect learned predictor in the pose-recovery suites.
    """
    rng = np.random.default_rng(seed)
    scale = np.linalg.norm(scene.centers, axis=1, keepdims=True)
    noisy = scene.centers + rng.normal(size=scene.centers.shape) * sigma_rel * scale
    return replace(scene, centers=noisy)
