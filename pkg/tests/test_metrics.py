import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from canonsplat import lie, metrics
from canonsplat.scene import CameraPose


def test_psnr_identical_is_capped():
    a = np.full((4, 4, 3), 0.3)
    assert metrics.psnr(a, a) == metrics.PSNR_CAP == 99.0


def test_psnr_known_value():
    a = np.zeros((4, 4))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        metrics.mse(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert metrics.ssim(a, a) == pytest.approx(1.0)
    assert metrics.ssim_structural(a, a) == pytest.approx(1.0)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        metrics.ssim(np.zeros((8, 20)), np.zeros((8, 20)))


def test_structural_ignores_brightness_and_contrast(rng):
    a = rng.uniform(size=(20, 20))
    assert metrics.ssim_structural(0.5 * a + 0.2, a) == pytest.approx(1.0, abs=1e-3)
    assert metrics.ssim(0.5 * a + 0.2, a) < 0.9


@pytest.mark.parametrize("shape", [(14, 17), (13, 12, 3)])
def test_ssim_matches_bruteforce(shape, rng):
    a = rng.uniform(size=shape)
    b = np.clip(a + rng.normal(scale=0.1, size=shape), 0, 1)
    assert metrics.ssim(a, b) == pytest.approx(ref.ssim_bruteforce(a, b), abs=1e-12)
    assert metrics.ssim_structural(a, b) == pytest.approx(ref.ssim_bruteforce(a, b, True),
                                                          abs=1e-12)


def test_structural_gradient_matches_differences(rng):
    a = rng.uniform(size=(13, 14, 3))
    b = rng.uniform(size=(13, 14, 3))
    _, g = metrics.ssim_structural_grad(a, b)
    h = 1e-6
    for idx in [(0, 0, 0), (6, 7, 1), (12, 13, 2), (3, 10, 0)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (metrics.ssim_structural(ap, b) - metrics.ssim_structural(am, b)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_reconstruction_loss_default_weights():
    cfg = metrics.LossConfig()
    assert (cfg.mse_weight, cfg.perceptual_weight) == (1.0, 0.05)
    with pytest.raises(ValueError):
        metrics.LossConfig(mse_weight=-1)


class _Scorer:
    def __call__(self, render, target):
        return float(np.sum(np.abs(render - target)))

    def gradient(self, render, target):
        return np.sign(render - target)


def test_reconstruction_loss_with_scorer(rng):
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    cfg = metrics.LossConfig(perceptual_scorer=_Scorer())
    loss, grad = metrics.reconstruction_loss(a, b, cfg)
    assert loss == pytest.approx(np.mean((a - b) ** 2) + 0.05 * np.abs(a - b).sum())
    np.testing.assert_allclose(grad, 2 * (a - b) / a.size + 0.05 * np.sign(a - b))


def test_perceptual_scorer_contract(rng):
    a = rng.uniform(size=(12, 12, 3))
    # no scorer: the term is dropped unless explicitly required
    assert metrics.reconstruction_loss(a, 0 * a)[0] == pytest.approx(np.mean(a ** 2))
    with pytest.raises(ValueError, match="no scorer"):
        metrics.reconstruction_loss(a, a, metrics.LossConfig(require_perceptual=True))
    eval_only = metrics.LossConfig(perceptual_scorer=lambda r, t: 0.0)
    assert metrics.reconstruction_loss(a, a, eval_only, with_grad=False)[1] is None
    with pytest.raises(ValueError, match="evaluation-only"):
        metrics.reconstruction_loss(a, a, eval_only)


def test_loss_with_structural_term_gradient(rng):
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    cfg = metrics.LossConfig(ssim_structural_weight=0.2)
    _, g = metrics.reconstruction_loss(a, b, cfg)
    h = 1e-6
    ap, am = a.copy(), a.copy()
    ap[5, 5, 1] += h
    am[5, 5, 1] -= h
    fd = (metrics.reconstruction_loss(ap, b, cfg, False)[0]
          - metrics.reconstruction_loss(am, b, cfg, False)[0]) / (2 * h)
    assert g[5, 5, 1] == pytest.approx(fd, rel=1e-5)


def test_pose_error_examples():
    I = CameraPose.identity()
    t = CameraPose(np.eye(3), np.array([1.0, 0, 0]))
    assert metrics.pose_error(I, I) == metrics.PoseError(0.0, 0.0)
    assert metrics.pose_error(I, t).translation_dir_deg == 90.0
    R = CameraPose(lie.so3_exp([0, 0, np.radians(30)]), np.array([0.0, 1.0, 0.0]))
    e = metrics.pose_error(R, t)
    assert e.rotation_deg == pytest.approx(30.0)
    assert e.translation_dir_deg == pytest.approx(90.0)
    assert e.combined_deg == pytest.approx(90.0)
    flipped = CameraPose(np.eye(3), np.array([-2.0, 0, 0]))
    assert metrics.pose_error(flipped, t).translation_dir_deg == pytest.approx(180.0)


def test_pose_auc_examples():
    assert metrics.pose_auc([0.0]) == [1.0, 1.0, 1.0]
    assert metrics.pose_auc([90.0]) == [0.0, 0.0, 0.0]
    assert metrics.pose_auc([2.5], [5.0]) == [pytest.approx(0.5)]
    with pytest.raises(ValueError):
        metrics.pose_auc([])
    with pytest.raises(ValueError):
        metrics.pose_auc([-1.0])
    with pytest.raises(ValueError):
        metrics.pose_auc([1.0], [0.0])


@settings(max_examples=60)
@given(st.lists(st.floats(0, 60, allow_nan=False), min_size=1, max_size=30),
       st.floats(0.5, 40))
def test_pose_auc_matches_piecewise_integral(errors, tau):
    (auc,) = metrics.pose_auc(errors, [tau])
    assert 0.0 <= auc <= 1.0
    assert auc == pytest.approx(ref.auc_piecewise(errors, tau), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(12, 13))
    b = rng.uniform(size=(12, 13))
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)


def test_summarize_skips_missing():
    assert metrics.summarize([1.0, None, math.nan, 3.0]) == 2.0
    assert metrics.summarize([None]) is None
