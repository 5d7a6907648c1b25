"""Scene and camera generators shared by the tests."""
import numpy as np

from canonsplat import lie
from canonsplat.scene import Camera, CameraIntrinsics, CameraPose, CanonicalScene
from canonsplat.sh import C0, num_coeffs


def random_scene(rng, n=None, sh_degree=0, size=32):
    """A handful of Gaussians in front of the identity camera, colours kept off the clamp."""
    n = int(rng.integers(1, 11)) if n is None else n
    z = rng.uniform(2.0, 4.0, n)
    xy = rng.uniform(-0.35, 0.35, (n, 2)) * z[:, None]
    centers = np.c_[xy, z]
    q = lie.quat_normalize(rng.normal(size=(n, 4)))
    scales = rng.uniform(0.05, 0.3, (n, 3))
    K = num_coeffs(sh_degree)
    coeffs = np.zeros((n, K, 3))
    coeffs[:, 0] = (rng.uniform(0.15, 0.85, (n, 3)) - 0.5) / C0
    if K > 1:
        coeffs[:, 1:] = rng.normal(scale=0.05, size=(n, K - 1, 3))
    return CanonicalScene(centers, rng.uniform(0.2, 0.9, n), q, scales, coeffs,
                          np.ones(n, dtype=np.int64), np.arange(n), num_views=1)


def small_camera(rng=None, size=32):
    k = CameraIntrinsics(float(size), float(size), size / 2.0, size / 2.0, size, size)
    if rng is None:
        return Camera(k, CameraPose.identity())
    R = lie.so3_exp(rng.normal(scale=0.05, size=3))
    return Camera(k, CameraPose(R, rng.normal(scale=0.05, size=3)))
