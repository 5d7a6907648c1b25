"""Gaussian primitives, cameras and canonical scenes."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import lie, sh


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    opacity: float
    rotation: np.ndarray  # (w, x, y, z)
    scale: np.ndarray
    sh: np.ndarray  # (K, 3)

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError(f"opacity {self.opacity} outside [0, 1]")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValidationError("rotation is not a unit quaternion")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValidationError("scale components must be positive")
        sh.degree_from_coeffs(np.asarray(self.sh).shape[0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def default_for(cls, height, width):
        """Focal length (H + W) / 2 with the principal point at the image centre."""
        f = (height + width) / 2.0
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def scaled(self, factor):
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                                self.cy * factor, round(self.width * factor),
                                round(self.height * factor))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform, ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("pose needs a 3x3 rotation and a 3-vector translation")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValidationError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, quat, translation):
        return cls(lie.quat_to_rotmat(quat), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def quat(self):
        return lie.rotmat_to_quat(self.rotation)

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def inverse(self):
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def retract(self, xi):
        """Left retraction ``exp(xi) * self``."""
        dR, dt = lie.se3_exp(xi)
        return CameraPose(dR @ self.rotation, dR @ self.translation + dt)


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose = field(default_factory=CameraPose.identity)

    def with_pose(self, pose):
        return replace(self, pose=pose)


@dataclass(frozen=True)
class ViewBundle:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    intrinsics: CameraIntrinsics
    depth: np.ndarray | None = None
    pose: CameraPose | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError("image must be H x W x 3")
        if img.min() < 0 or img.max() > 1:
            raise ValidationError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", img)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != img.shape[:2]:
                raise ValidationError("depth shape does not match image")
            if not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValidationError("depth must be positive and finite")
            object.__setattr__(self, "depth", d)

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass(frozen=True, eq=False)
class CanonicalScene:
    """Pixel-aligned Gaussians expressed in the first view's camera frame.

    Stored as parallel arrays; ``source_view`` is 1-based.
    """

    centers: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    sh: np.ndarray  # (N, K, 3)
    source_view: np.ndarray  # (N,)
    source_pixel: np.ndarray  # (N,)
    num_views: int = 1
    view_shape: tuple[int, int] = (0, 0)

    def __post_init__(self):
        n = len(self.centers)
        for name in ("opacities", "rotations", "scales", "sh", "source_view", "source_pixel"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {n}")

    def __len__(self):
        return len(self.centers)

    @property
    def sh_degree(self):
        return sh.degree_from_coeffs(self.sh.shape[1])

    def primitive(self, i):
        return GaussianPrimitive(self.centers[i].copy(), float(self.opacities[i]),
                                 self.rotations[i].copy(), self.scales[i].copy(),
                                 self.sh[i].copy())

    @property
    def primitives(self):
        return [self.primitive(i) for i in range(len(self))]

    def subset(self, mask):
        return replace(self, centers=self.centers[mask], opacities=self.opacities[mask],
                       rotations=self.rotations[mask], scales=self.scales[mask],
                       sh=self.sh[mask], source_view=self.source_view[mask],
                       source_pixel=self.source_pixel[mask])

    @classmethod
    def from_primitives(cls, prims, source_view=None, source_pixel=None, num_views=1,
                        view_shape=(0, 0)):
        n = len(prims)
        return cls(
            centers=np.array([p.center for p in prims], dtype=np.float64).reshape(n, 3),
            opacities=np.array([p.opacity for p in prims], dtype=np.float64),
            rotations=np.array([p.rotation for p in prims], dtype=np.float64).reshape(n, 4),
            scales=np.array([p.scale for p in prims], dtype=np.float64).reshape(n, 3),
            sh=np.array([p.sh for p in prims], dtype=np.float64).reshape(n, -1, 3),
            source_view=np.ones(n, dtype=np.int64) if source_view is None else np.asarray(source_view),
            source_pixel=np.arange(n) if source_pixel is None else np.asarray(source_pixel),
            num_views=num_views, view_shape=tuple(view_shape),
        )

    @classmethod
    def empty(cls, sh_degree=0):
        K = sh.num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, K, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def concatenate(cls, scenes, num_views=None):
        scenes = list(scenes)
        return cls(
            centers=np.concatenate([s.centers for s in scenes]),
            opacities=np.concatenate([s.opacities for s in scenes]),
            rotations=np.concatenate([s.rotations for s in scenes]),
            scales=np.concatenate([s.scales for s in scenes]),
            sh=np.concatenate([s.sh for s in scenes]),
            source_view=np.concatenate([s.source_view for s in scenes]),
            source_pixel=np.concatenate([s.source_pixel for s in scenes]),
            num_views=num_views if num_views is not None else max(s.num_views for s in scenes),
            view_shape=scenes[0].view_shape,
        )


@dataclass
class ValidationReport:
    violations: list[tuple[str, int]] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def names(self):
        return sorted({name for name, _ in self.violations})

    def __bool__(self):
        return self.ok


def validate_scene(scene):
    """Check every primitive against the scene invariants.

    Never raises; returns a report listing ``(invariant, primitive index)``.
    """
    report = ValidationReport()

    def flag(name, mask):
        for i in np.flatnonzero(mask):
            report.violations.append((name, int(i)))

    flag("opacity range", ~((scene.opacities >= 0) & (scene.opacities <= 1)))
    flag("quaternion norm", np.abs(np.linalg.norm(scene.rotations, axis=1) - 1) > 1e-6)
    flag("scale positive", ~np.all(scene.scales > 0, axis=1))
    flag("finite center", ~np.all(np.isfinite(scene.centers), axis=1))
    flag("source view range", (scene.source_view < 1) | (scene.source_view > scene.num_views))
    try:
        sh.degree_from_coeffs(scene.sh.shape[1])
    except ValueError:
        report.violations.append(("sh coefficient count", -1))
    H, W = scene.view_shape
    if H * W > 0 and len(scene) == scene.num_views * H * W:
        keys = (scene.source_view - 1) * H * W + scene.source_pixel
        if len(np.unique(keys)) != len(scene) or keys.min() < 0 or keys.max() >= len(scene):
            report.violations.append(("pixel alignment", -1))
    return report


def transform_scene(scene, pose):
    """Apply the rigid map ``x -> R x + t`` to every primitive."""
    if not isinstance(pose, CameraPose):
        raise ValidationError("pose must be a CameraPose")
    R, t = pose.rotation, pose.translation
    if np.array_equal(R, np.eye(3)):
        if not np.any(t):
            return scene
        return replace(scene, centers=scene.centers + t)
    q = lie.rotmat_to_quat(R)
    rotations = lie.quat_normalize(lie.quat_multiply(q, scene.rotations))
    coeffs = scene.sh
    if scene.sh_degree > 0:
        M = sh.sh_rotation_matrix(R, scene.sh_degree)
        coeffs = np.einsum("jk,nkc->njc", M, scene.sh)
    return replace(scene, centers=scene.centers @ R.T + t, rotations=rotations, sh=coeffs)
