from dataclasses import replace

import numpy as np
import pytest

import reference as ref
from canonsplat import rasterizer as rz
from canonsplat.scene import (Camera, CameraIntrinsics, CameraPose, CanonicalScene,
                              GaussianPrimitive)
from canonsplat.sh import C0
from helpers import random_scene, small_camera


def _one(center, opacity=0.8, scale=0.1, rgb=(0.2, 0.6, 0.9)):
    g = GaussianPrimitive(np.asarray(center, float), opacity, np.array([1.0, 0, 0, 0]),
                          np.full(3, scale), ((np.asarray(rgb) - 0.5) / C0)[None, :])
    return CanonicalScene.from_primitives([g])


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_forward_matches_reference(degree):
    for seed in range(8):
        rng = np.random.default_rng(100 * degree + seed)
        scene = random_scene(rng, sh_degree=degree)
        cam = small_camera(rng)
        bg = rng.uniform(0, 1, 3)
        color, T, _ = ref.render(scene, cam, bg)
        out = rz.render(scene, cam, bg)
        np.testing.assert_allclose(out.color, color, atol=1e-12)
        np.testing.assert_allclose(out.transmittance, T, atol=1e-12)


def test_non_square_and_multi_tile_image(rng):
    scene = random_scene(rng, n=10)
    k = CameraIntrinsics(40.0, 40.0, 23.0, 9.5, 45, 19)
    cam = Camera(k, CameraPose.identity())
    color, _, _ = ref.render(scene, cam)
    assert rz.render(scene, cam).color.shape == (19, 45, 3)
    np.testing.assert_allclose(rz.render(scene, cam).color, color, atol=1e-12)


def test_empty_scene_is_background():
    out = rz.render(CanonicalScene.empty(), small_camera(), (0.1, 0.2, 0.3))
    np.testing.assert_allclose(out.color, np.broadcast_to([0.1, 0.2, 0.3], (32, 32, 3)))
    assert np.all(out.alpha == 0) and np.all(out.n_contrib == 0)


def test_single_splat_centre_pixel():
    # splat centred on pixel (16, 16) centre: alpha there is exactly the opacity
    scene = _one([0.5 / 32 * 3, 0.5 / 32 * 3, 3.0])
    out = rz.render(scene, small_camera())
    np.testing.assert_allclose(out.color[16, 16], 0.8 * np.array([0.2, 0.6, 0.9]), atol=1e-12)
    assert out.n_contrib[16, 16] == 1
    np.testing.assert_allclose(out.depth[16, 16], 3.0)


def test_behind_camera_is_culled():
    scene = _one([0.0, 0.0, -1.0])
    out = rz.render(scene, small_camera())
    assert np.all(out.alpha == 0)
    with pytest.raises(rz.BehindCamera):
        rz.project_gaussian(scene.primitive(0), small_camera())
    near = _one([0.0, 0.0, rz.NEAR_PLANE])
    assert np.all(rz.render(near, small_camera()).alpha == 0)


def test_project_gaussian_covariance():
    g = _one([0.3, -0.2, 2.0], scale=0.2).primitive(0)
    s = rz.project_gaussian(g, small_camera())
    J = np.array([[16.0, 0, -32 * 0.3 / 4], [0, 16.0, 32 * 0.2 / 4]])
    np.testing.assert_allclose(s.cov2d, 0.04 * J @ J.T + 0.3 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(s.mean2d, [16 + 32 * 0.15, 16 - 32 * 0.1])
    assert s.depth == 2.0


def test_low_opacity_is_skipped():
    scene = _one([0.0, 0.0, 3.0], opacity=0.5 / 255)
    assert np.all(rz.render(scene, small_camera()).n_contrib == 0)


def test_early_termination_stops_compositing():
    # 12 near-opaque splats stacked at one pixel drive T below the cut-off
    prims = [GaussianPrimitive(np.array([0.0, 0.0, 2.0 + 0.1 * i]), 0.99,
                               np.array([1.0, 0, 0, 0]), np.full(3, 0.3), np.zeros((1, 3)))
             for i in range(12)]
    scene = CanonicalScene.from_primitives(prims)
    out = rz.render(scene, small_camera())
    assert out.n_contrib[16, 16] <= 3
    assert out.transmittance[16, 16] < rz.MIN_TRANSMITTANCE
    color, T, _ = ref.render(scene, small_camera())
    np.testing.assert_allclose(out.transmittance, T, atol=1e-15)


def test_depth_ties_break_by_index():
    a = _one([0.0, 0.0, 3.0], rgb=(1, 0, 0))
    b = _one([0.0, 0.0, 3.0], rgb=(0, 0, 1))
    ab = CanonicalScene.concatenate([a, b])
    out = rz.render(ab, small_camera())
    assert out.color[16, 16, 0] > out.color[16, 16, 2]
    color, _, _ = ref.render(ab, small_camera())
    np.testing.assert_allclose(out.color, color, atol=1e-12)


def test_upstream_shape_is_checked(rng):
    scene = random_scene(rng)
    with pytest.raises(ValueError):
        rz.render_with_param_gradients(scene, small_camera(), np.zeros((8, 8, 3)))


def _fd_check(scene, cam, field, upstream, bg, h=1e-5):
    base = getattr(scene, field)

    def f(x):
        c, _, sig = ref.render(replace(scene, **{field: x.reshape(base.shape)}), cam, bg)
        return float(np.sum(upstream * c)), sig

    fd, keep = ref.central_difference(f, base, h)
    return fd, keep


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_higher_degree_sh_gradients(degree):
    rng = np.random.default_rng(degree)
    scene = random_scene(rng, n=4, sh_degree=degree)
    cam = small_camera(rng)
    up = rng.normal(size=(32, 32, 3))
    _, g = rz.render_with_param_gradients(scene, cam, up)
    for field in ("sh", "centers"):
        fd, keep = _fd_check(scene, cam, field, up, np.zeros(3))
        assert ref.relative_error(getattr(g, field), fd, keep) < 1e-4


def test_pose_gradient_includes_view_dependent_colour():
    rng = np.random.default_rng(7)
    scene = random_scene(rng, n=5, sh_degree=2)
    cam = small_camera(rng)
    up = rng.normal(size=(32, 32, 3))
    _, g = rz.render_with_pose_gradient(scene, cam, up)

    def f(xi):
        c, _, sig = ref.render(scene, cam.with_pose(cam.pose.retract(xi)))
        return float(np.sum(up * c)), sig

    fd, keep = ref.central_difference(f, np.zeros(6), 1e-6)
    assert keep.all()
    assert ref.relative_error(g, fd, keep) < 1e-4


def test_gradients_ignore_culled_primitives(rng):
    scene = CanonicalScene.concatenate([random_scene(rng, n=3), _one([0.0, 0.0, -2.0])])
    _, g = rz.render_with_param_gradients(scene, small_camera(), rng.normal(size=(32, 32, 3)))
    for field in ("centers", "opacities", "rotations", "scales", "sh"):
        assert np.all(getattr(g, field)[3] == 0)
    assert g.flat().shape == (4 * (3 + 1 + 4 + 3 + 3),)


def test_unnormalised_quaternion_gradient_is_tangent(rng):
    scene = random_scene(rng, n=4)
    scene = replace(scene, rotations=scene.rotations * 2.0)
    up = rng.normal(size=(32, 32, 3))
    _, g = rz.render_with_param_gradients(scene, small_camera(), up)
    # scaling a quaternion does not change the render, so the gradient is orthogonal to it
    np.testing.assert_allclose(np.sum(g.rotations * scene.rotations, axis=1), 0, atol=1e-10)


def test_pose_loss_and_gradient_uses_loss_value(rng):
    scene = random_scene(rng)
    cam = small_camera(rng)
    target = rng.uniform(0, 1, (32, 32, 3))

    def loss(img):
        d = img - target
        return float(np.mean(d * d)), 2 * d / d.size

    out, value, g = rz.pose_loss_and_gradient(scene, cam, loss)
    assert value == pytest.approx(np.mean((out.color - target) ** 2))
    _, g2 = rz.render_with_pose_gradient(scene, cam, 2 * (out.color - target) / target.size)
    np.testing.assert_allclose(g, g2)
