"""Procedural Lambertian scenes with exact depth and pose.

A scene is the inside of an axis-aligned box ("room") whose walls carry a
smooth view-independent texture.  Cameras sit inside the box looking
roughly along +z, so every pixel ray hits a wall and depth is dense.
The first view's camera frame is the world frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .lifting import pixel_centers
from .scene import CameraIntrinsics, CameraPose, ViewBundle


@dataclass(frozen=True)
class Room:
    half_width: float
    half_height: float
    back: float
    front: float
    freqs: np.ndarray  # (3, 3) per-channel spatial frequency vectors
    phases: np.ndarray  # (3,)
    freqs2: np.ndarray
    phases2: np.ndarray

    def planes(self):
        # (normal, offset): n . x = offset, normals pointing into the room
        return [
            (np.array([0.0, 0.0, -1.0]), -self.back),
            (np.array([0.0, 0.0, 1.0]), self.front),
            (np.array([1.0, 0.0, 0.0]), -self.half_width),
            (np.array([-1.0, 0.0, 0.0]), -self.half_width),
            (np.array([0.0, 1.0, 0.0]), -self.half_height),
            (np.array([0.0, -1.0, 0.0]), -self.half_height),
        ]

    def albedo(self, points):
        p = np.asarray(points, dtype=np.float64)
        a = np.sin(p @ self.freqs.T + self.phases)
        b = np.sin(p @ self.freqs2.T + self.phases2)
        return np.clip(0.5 + 0.25 * a + 0.15 * b, 0.0, 1.0)


def random_room(rng, max_freq=1.0):
    return Room(
        half_width=float(rng.uniform(1.6, 2.2)),
        half_height=float(rng.uniform(1.2, 1.6)),
        back=float(rng.uniform(3.0, 4.0)),
        front=-1.5,
        freqs=rng.uniform(-max_freq, max_freq, (3, 3)),
        phases=rng.uniform(0, 2 * np.pi, 3),
        freqs2=rng.uniform(-max_freq, max_freq, (3, 3)),
        phases2=rng.uniform(0, 2 * np.pi, 3),
    )


def raycast(room, intrinsics, pose):
    """Ground-truth image and z-depth seen by a camera with ``pose`` (world-to-camera)."""
    H, W = intrinsics.height, intrinsics.width
    p = pixel_centers(H, W)
    d_cam = np.stack([(p[..., 0] - intrinsics.cx) / intrinsics.fx,
                      (p[..., 1] - intrinsics.cy) / intrinsics.fy,
                      np.ones((H, W))], axis=-1).reshape(-1, 3)
    d_world = d_cam @ pose.rotation
    origin = pose.center
    best = np.full(len(d_world), np.inf)
    for n, off in room.planes():
        denom = d_world @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (off - origin @ n) / denom
        t = np.where((denom < 0) & (t > 1e-9), t, np.inf)
        best = np.minimum(best, t)
    if not np.all(np.isfinite(best)):
        raise ValueError("camera is outside the room")
    points = origin + best[:, None] * d_world
    image = room.albedo(points).reshape(H, W, 3)
    # d_cam has unit z, so the ray parameter is the camera-frame depth
    return image, best.reshape(H, W)


def look_pose(rotvec, center):
    """World-to-camera pose for a camera at ``center`` rotated by ``rotvec``."""
    R_wc = lie.so3_exp(rotvec)  # camera-to-world rotation
    R = R_wc.T
    return CameraPose(R, -R @ np.asarray(center, dtype=np.float64))


def interpolate_pose(a, b, s):
    """Geodesic blend of two camera poses (rotation and centre)."""
    R_rel = b.rotation @ a.rotation.T
    R = lie.so3_exp(s * lie.so3_log(R_rel)) @ a.rotation
    c = (1 - s) * a.center + s * b.center
    return CameraPose(R, -R @ c)


@dataclass(frozen=True)
class SyntheticPair:
    room: Room
    views: list
    target_pose: CameraPose
    target_image: np.ndarray
    target_depth: np.ndarray


def make_view(room, intrinsics, pose):
    image, depth = raycast(room, intrinsics, pose)
    return ViewBundle(image=image, intrinsics=intrinsics, depth=depth, pose=pose)


def make_pair(seed, size=32, focal_scale=1.0, rotation_deg=(5.0, 12.0), baseline=(0.25, 0.45),
              num_views=2, max_freq=1.0):
    """Two (or more) context views plus a held-out target between them.

    View 1 is the world frame.  The last view is displaced sideways by
    ``baseline`` and turned back towards the scene by ``rotation_deg``;
    extra views sit between the two; the target sits half way.
    ``max_freq`` bounds the texture's spatial frequency (radians per unit).
    """
    rng = np.random.default_rng(seed)
    room = random_room(rng, max_freq)
    f = focal_scale * size
    k = CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)
    sign = rng.choice([-1.0, 1.0])
    base = rng.uniform(*baseline)
    c2 = np.array([sign * base, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)])
    angle = np.radians(rng.uniform(*rotation_deg))
    axis = np.array([rng.uniform(-0.2, 0.2), -sign, rng.uniform(-0.2, 0.2)])
    axis /= np.linalg.norm(axis)
    last = look_pose(angle * axis, c2)
    first = CameraPose.identity()
    poses = [first]
    for i in range(1, num_views - 1):
        poses.append(interpolate_pose(first, last, i / (num_views - 1)))
    poses.append(last)
    views = [make_view(room, k, p) for p in poses]
    target = interpolate_pose(first, last, 0.5)
    timg, tdepth = raycast(room, k, target)
    return SyntheticPair(room, views, target, timg, tdepth)


def perturb_pose(pose, rotation_deg, translation_frac, rng):
    """Left-perturb by an exact rotation angle and a relative translation offset."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = lie.so3_exp(np.radians(rotation_deg) * axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    scale = max(np.linalg.norm(pose.translation), 1e-3)
    return CameraPose(R @ pose.rotation, pose.translation + translation_frac * scale * d)
