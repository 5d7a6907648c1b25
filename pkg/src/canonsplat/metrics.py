"""Image losses and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_C3 = SSIM_C2 / 2
AUC_THRESHOLDS = (5.0, 10.0, 20.0)


class PerceptualScorer(Protocol):
    """Pluggable perceptual distance (e.g. an LPIPS network).

    ``gradient`` is optional; scorers without it are evaluation-only.
    """

    def __call__(self, render: np.ndarray, target: np.ndarray) -> float: ...


@dataclass(frozen=True)
class LossConfig:
    mse_weight: float = 1.0
    perceptual_weight: float = 0.05
    ssim_structural_weight: float = 0.0
    perceptual_scorer: Optional[Callable] = None
    # raise instead of silently dropping a weighted perceptual term with no scorer
    require_perceptual: bool = False

    def __post_init__(self):
        if min(self.mse_weight, self.perceptual_weight, self.ssim_structural_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class PoseError:
    rotation_deg: float
    translation_dir_deg: float

    @property
    def combined_deg(self):
        return max(self.rotation_deg, self.translation_dir_deg)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / m))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, w):
    """Separable 'valid' correlation over the two leading axes of (H, W, C)."""
    x = sliding_window_view(x, len(w), axis=0) @ w
    return sliding_window_view(x, len(w), axis=1) @ w


def _filter_adjoint(g, w):
    """Adjoint of :func:`_filter_valid` (full convolution; ``w`` is symmetric)."""
    p = len(w) - 1
    g = np.pad(g, ((p, p), (p, p), (0, 0)))
    return _filter_valid(g, w[::-1])


def _as_hwc(x):
    return x[..., None] if x.ndim == 2 else x


def _moments(a, b, w):
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _prepare(a, b):
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return a, b


def ssim(a, b):
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), averaged over channels."""
    a, b = _prepare(a, b)
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, gaussian_window())
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _structural_map(a, b):
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, gaussian_window())
    sd_a = np.sqrt(np.maximum(var_a, 0.0))
    sd_b = np.sqrt(np.maximum(var_b, 0.0))
    return (cov + SSIM_C3) / (sd_a * sd_b + SSIM_C3), (mu_a, mu_b, sd_a, sd_b, cov)


def ssim_structural(a, b):
    """Mean of the SSIM structure factor ``(cov + C3) / (sd_a sd_b + C3)``."""
    a, b = _prepare(a, b)
    s, _ = _structural_map(a, b)
    return float(np.mean(s))


def ssim_structural_grad(a, b):
    """Value and gradient of :func:`ssim_structural` with respect to ``a``."""
    squeeze = np.asarray(a).ndim == 2
    a, b = _prepare(a, b)
    w = gaussian_window()
    s, (mu_a, mu_b, sd_a, sd_b, cov) = _structural_map(a, b)
    gs = 1.0 / s.size
    den = sd_a * sd_b + SSIM_C3
    g_cov = gs / den
    g_sd = -gs * (cov + SSIM_C3) * sd_b / den**2
    sd_safe = np.maximum(sd_a, 1e-6)
    g_ex2 = g_sd / (2 * sd_safe)
    g_mu = -g_cov * mu_b - g_sd * mu_a / sd_safe
    grad = (_filter_adjoint(g_mu, w) + 2 * a * _filter_adjoint(g_ex2, w)
            + b * _filter_adjoint(g_cov, w))
    return float(np.mean(s)), grad[..., 0] if squeeze else grad


def reconstruction_loss(render, target, cfg=LossConfig(), with_grad=True):
    """Weighted MSE + perceptual + (1 - structural SSIM).

    Returns ``(loss, dloss/drender)``; the gradient is ``None`` when
    ``with_grad`` is false.
    """
    render, target = _check_pair(render, target)
    diff = render - target
    loss = cfg.mse_weight * float(np.mean(diff**2))
    grad = cfg.mse_weight * 2.0 * diff / diff.size if with_grad else None
    if cfg.ssim_structural_weight > 0:
        if with_grad:
            s, gs = ssim_structural_grad(render, target)
            grad = grad - cfg.ssim_structural_weight * gs
        else:
            s = ssim_structural(render, target)
        loss += cfg.ssim_structural_weight * (1.0 - s)
    if cfg.perceptual_weight > 0:
        scorer = cfg.perceptual_scorer
        if scorer is None:
            if cfg.require_perceptual:
                raise ValueError("perceptual term requested but no scorer is plugged in")
        else:
            loss += cfg.perceptual_weight * float(scorer(render, target))
            if with_grad:
                if not hasattr(scorer, "gradient"):
                    raise ValueError("perceptual scorer is evaluation-only (no gradient)")
                grad = grad + cfg.perceptual_weight * np.asarray(scorer.gradient(render, target))
    return loss, grad


def _angle_deg(u, v):
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def pose_error(est, gt):
    """Rotation angle and translation-direction angle between two poses.

    A zero-length ground-truth translation gives direction error 0; a
    zero-length estimate against a non-zero ground truth gives 90.
    """
    cos = (np.trace(est.rotation @ gt.rotation.T) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    if np.linalg.norm(gt.translation) < 1e-8:
        trans = 0.0
    elif np.linalg.norm(est.translation) < 1e-8:
        trans = 90.0
    else:
        trans = _angle_deg(est.translation, gt.translation)
    return PoseError(rot, trans)


def pose_auc(errors: Sequence[float], thresholds: Sequence[float] = AUC_THRESHOLDS):
    """Normalised area under the empirical error CDF up to each threshold.

    The CDF is a step function, so the integral is exact:
    ``(1 / (n * tau)) * sum(max(0, tau - e_i))``.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("pose_auc needs at least one error")
    if np.any(e < 0) or np.any(np.isnan(e)):
        raise ValueError("pose errors must be non-negative")
    out = []
    for tau in thresholds:
        if tau <= 0:
            raise ValueError("thresholds must be positive")
        out.append(float(np.sum(np.maximum(0.0, tau - e)) / (e.size * tau)))
    return out


def summarize(values):
    values = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(values)) if values else None
