"""Tile-based software splatting with analytic backward passes.

Forward: project every primitive to a 2D splat (EWA), bin splats into
16x16 pixel tiles, sort each tile's list by camera depth, then alpha
composite front to back per pixel.  Backward: replay each pixel's
compositing in reverse to get per-splat gradients, then chain through the
projection to either the Gaussian parameters or the camera pose.

Pose gradients use a left-multiplied tangent ``exp(xi) * T_cw`` with
``xi = (rho, phi)``: translation first, rotation second.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import lie, sh

EPS_2D = 0.3
NEAR_PLANE = 0.01
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
TILE_SIZE = 16


class BehindCamera(ValueError):
    pass


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W) final T
    n_contrib: np.ndarray  # (H, W) splats composited per pixel


@dataclass
class ParamGradients:
    centers: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray

    def flat(self):
        return np.concatenate([self.centers.ravel(), self.opacities.ravel(),
                               self.rotations.ravel(), self.scales.ravel(), self.sh.ravel()])


@dataclass
class _Projected:
    """Per-primitive forward intermediates kept for the backward pass."""

    visible: np.ndarray
    p_cam: np.ndarray
    means: np.ndarray
    J: np.ndarray
    V: np.ndarray
    cov: np.ndarray
    conics: np.ndarray
    Rq: np.ndarray
    M3: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    basis: np.ndarray
    raw_color: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray


def _project_arrays(centers, opacities, rotations, scales, coeffs, camera, eps2d=EPS_2D):
    k = camera.intrinsics
    Rc, t = camera.pose.rotation, camera.pose.translation
    n = len(centers)
    p = centers @ Rc.T + t
    z = p[:, 2]
    visible = z > NEAR_PLANE
    zs = np.where(visible, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    means = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * x / zs**2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * y / zs**2

    qnorm = np.linalg.norm(rotations, axis=1)
    qn = rotations / qnorm[:, None]
    Rq = lie.quat_to_rotmat(qn)
    M3 = Rq * scales[:, None, :]
    Sigma = M3 @ M3.transpose(0, 2, 1)
    V = Rc @ Sigma @ Rc.T
    cov = J @ V @ J.transpose(0, 2, 1) + eps2d * np.eye(2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conics = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)

    dirs = centers - camera.pose.center
    dir_norm = np.linalg.norm(dirs, axis=1)
    dir_norm = np.where(dir_norm > 0, dir_norm, 1.0)
    degree = sh.degree_from_coeffs(coeffs.shape[1])
    basis = sh.sh_basis(dirs / dir_norm[:, None], degree)
    raw_color = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs)
    colors = np.clip(raw_color, 0.0, 1.0)

    # pixel extent where opacity * exp(power) can still reach MIN_ALPHA
    with np.errstate(divide="ignore"):
        q = 2.0 * np.log(np.maximum(opacities, 1e-30) / MIN_ALPHA)
    visible &= q > 0
    q = np.maximum(q, 0.0)
    radii = np.stack([np.sqrt(cov[:, 0, 0] * q), np.sqrt(cov[:, 1, 1] * q)], axis=1) + 1.0
    return _Projected(visible, p, means, J, V, cov, conics, Rq, M3, qn, qnorm, dirs,
                      dir_norm, basis, raw_color, colors, opacities, radii)


def _project_scene(scene, camera):
    return _project_arrays(scene.centers, scene.opacities, scene.rotations, scene.scales,
                           scene.sh, camera)


def project_gaussian(g, cam):
    """Project a single primitive; raises :class:`BehindCamera` when culled."""
    z = (cam.pose.rotation @ g.center + cam.pose.translation)[2]
    if z <= NEAR_PLANE:
        raise BehindCamera(f"primitive is behind camera (z={z:.4g})")
    pr = _project_arrays(np.asarray(g.center, float)[None], np.array([g.opacity]),
                         np.asarray(g.rotation, float)[None], np.asarray(g.scale, float)[None],
                         np.asarray(g.sh, float)[None], cam)
    return Splat2D(pr.means[0], pr.cov[0], float(pr.p_cam[0, 2]), pr.colors[0], g.opacity)


def _bin_tiles(pr, H, W, tile):
    """Per-tile splat lists sorted by depth; returns (offsets, ids)."""
    tx, ty = (W + tile - 1) // tile, (H + tile - 1) // tile
    idx = np.flatnonzero(pr.visible)
    if len(idx) == 0:
        return np.zeros(tx * ty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    m, r = pr.means[idx], pr.radii[idx]
    x0 = np.clip(np.floor((m[:, 0] - r[:, 0]) / tile), 0, tx).astype(np.int64)
    x1 = np.clip(np.floor((m[:, 0] + r[:, 0]) / tile) + 1, 0, tx).astype(np.int64)
    y0 = np.clip(np.floor((m[:, 1] - r[:, 1]) / tile), 0, ty).astype(np.int64)
    y1 = np.clip(np.floor((m[:, 1] + r[:, 1]) / tile) + 1, 0, ty).astype(np.int64)
    wx, wy = x1 - x0, y1 - y0
    counts = wx * wy
    keep = counts > 0
    idx, x0, y0, wx, counts = idx[keep], x0[keep], y0[keep], wx[keep], counts[keep]
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = x0[owner] + local % wx[owner]
    tile_y = y0[owner] + local // wx[owner]
    tile_id = tile_y * tx + tile_x
    ids = idx[owner]
    order = np.lexsort((ids, pr.p_cam[ids, 2], tile_id))
    tile_id, ids = tile_id[order], ids[order]
    offsets = np.searchsorted(tile_id, np.arange(tx * ty + 1))
    return offsets.astype(np.int64), ids.astype(np.int64)


SUB_BLOCK = 4


@numba.njit(cache=True)
def _block_list(ids, start, end, means, radii, x0, x1, y0, y1, buf):
    """Keep the depth-ordered splats whose extent reaches pixels [x0, x1) x [y0, y1)."""
    n = 0
    for k in range(start, end):
        i = ids[k]
        if means[i, 0] + radii[i, 0] < x0 + 0.5 or means[i, 0] - radii[i, 0] > x1 - 0.5:
            continue
        if means[i, 1] + radii[i, 1] < y0 + 0.5 or means[i, 1] - radii[i, 1] > y1 - 0.5:
            continue
        buf[n] = i
        n += 1
    return n


@numba.njit(cache=True)
def _forward_kernel(offsets, ids, means, radii, conics, opacities, colors, depths, bg, H, W,
                    tile, min_alpha, min_t):
    tx = (W + tile - 1) // tile
    ty = (H + tile - 1) // tile
    out_c = np.zeros((H, W, 3))
    out_d = np.zeros((H, W))
    out_t = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    # each tile's list is narrowed per sub-block; per-pixel order is unchanged
    buf = np.empty(ids.shape[0], dtype=np.int64)
    for tyi in range(ty):
        for txi in range(tx):
            t = tyi * tx + txi
            for by in range(tyi * tile, min(H, (tyi + 1) * tile), SUB_BLOCK):
                for bx in range(txi * tile, min(W, (txi + 1) * tile), SUB_BLOCK):
                    bx1 = min(bx + SUB_BLOCK, W, (txi + 1) * tile)
                    by1 = min(by + SUB_BLOCK, H, (tyi + 1) * tile)
                    nb = _block_list(ids, offsets[t], offsets[t + 1], means, radii,
                                     bx, bx1, by, by1, buf)
                    for py in range(by, by1):
                        for px in range(bx, bx1):
                            fx = px + 0.5
                            fy = py + 0.5
                            T = 1.0
                            c0 = 0.0
                            c1 = 0.0
                            c2 = 0.0
                            d = 0.0
                            count = 0
                            for k in range(nb):
                                i = buf[k]
                                dx = fx - means[i, 0]
                                dy = fy - means[i, 1]
                                if abs(dx) > radii[i, 0] or abs(dy) > radii[i, 1]:
                                    continue
                                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) \
                                    - conics[i, 1] * dx * dy
                                if power > 0.0:
                                    continue
                                alpha = opacities[i] * np.exp(power)
                                if alpha < min_alpha:
                                    continue
                                w = alpha * T
                                c0 += w * colors[i, 0]
                                c1 += w * colors[i, 1]
                                c2 += w * colors[i, 2]
                                d += w * depths[i]
                                T *= 1.0 - alpha
                                count += 1
                                if T < min_t:
                                    break
                            out_c[py, px, 0] = c0 + T * bg[0]
                            out_c[py, px, 1] = c1 + T * bg[1]
                            out_c[py, px, 2] = c2 + T * bg[2]
                            acc = 1.0 - T
                            out_d[py, px] = d / acc if acc > 0.0 else 0.0
                            out_t[py, px] = T
                            n_contrib[py, px] = count
    return out_c, out_d, out_t, n_contrib


@numba.njit(cache=True)
def _backward_kernel(offsets, ids, means, radii, conics, opacities, colors, bg, upstream, H, W,
                     tile, min_alpha, min_t, n_splats):
    tx = (W + tile - 1) // tile
    ty = (H + tile - 1) // tile
    g_means = np.zeros((n_splats, 2))
    g_conics = np.zeros((n_splats, 3))
    g_opac = np.zeros(n_splats)
    g_colors = np.zeros((n_splats, 3))
    max_len = 0
    for t in range(tx * ty):
        if offsets[t + 1] - offsets[t] > max_len:
            max_len = offsets[t + 1] - offsets[t]
    s_idx = np.empty(max_len, dtype=np.int64)
    s_alpha = np.empty(max_len)
    s_T = np.empty(max_len)
    s_G = np.empty(max_len)
    s_dx = np.empty(max_len)
    s_dy = np.empty(max_len)
    # each tile's list is narrowed per sub-block; per-pixel order is unchanged
    buf = np.empty(ids.shape[0], dtype=np.int64)
    for tyi in range(ty):
        for txi in range(tx):
            t = tyi * tx + txi
            for by in range(tyi * tile, min(H, (tyi + 1) * tile), SUB_BLOCK):
                for bx in range(txi * tile, min(W, (txi + 1) * tile), SUB_BLOCK):
                    bx1 = min(bx + SUB_BLOCK, W, (txi + 1) * tile)
                    by1 = min(by + SUB_BLOCK, H, (tyi + 1) * tile)
                    nb = _block_list(ids, offsets[t], offsets[t + 1], means, radii,
                                     bx, bx1, by, by1, buf)
                    for py in range(by, by1):
                        for px in range(bx, bx1):
                            u0 = upstream[py, px, 0]
                            u1 = upstream[py, px, 1]
                            u2 = upstream[py, px, 2]
                            if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                                continue
                            fx = px + 0.5
                            fy = py + 0.5
                            T = 1.0
                            n = 0
                            for k in range(nb):
                                i = buf[k]
                                dx = fx - means[i, 0]
                                dy = fy - means[i, 1]
                                if abs(dx) > radii[i, 0] or abs(dy) > radii[i, 1]:
                                    continue
                                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) \
                                    - conics[i, 1] * dx * dy
                                if power > 0.0:
                                    continue
                                G = np.exp(power)
                                alpha = opacities[i] * G
                                if alpha < min_alpha:
                                    continue
                                s_idx[n] = i
                                s_alpha[n] = alpha
                                s_T[n] = T
                                s_G[n] = G
                                s_dx[n] = dx
                                s_dy[n] = dy
                                n += 1
                                T *= 1.0 - alpha
                                if T < min_t:
                                    break
                            # colour and background-weight accumulated behind splat j
                            r0 = 0.0
                            r1 = 0.0
                            r2 = 0.0
                            B = 1.0
                            for j in range(n - 1, -1, -1):
                                i = s_idx[j]
                                a = s_alpha[j]
                                Tj = s_T[j]
                                w = a * Tj
                                g_colors[i, 0] += u0 * w
                                g_colors[i, 1] += u1 * w
                                g_colors[i, 2] += u2 * w
                                ga = Tj * (u0 * (colors[i, 0] - r0 - B * bg[0])
                                           + u1 * (colors[i, 1] - r1 - B * bg[1])
                                           + u2 * (colors[i, 2] - r2 - B * bg[2]))
                                r0 = colors[i, 0] * a + (1.0 - a) * r0
                                r1 = colors[i, 1] * a + (1.0 - a) * r1
                                r2 = colors[i, 2] * a + (1.0 - a) * r2
                                B *= 1.0 - a
                                g_opac[i] += ga * s_G[j]
                                gp = ga * a
                                dx = s_dx[j]
                                dy = s_dy[j]
                                g_means[i, 0] += gp * (conics[i, 0] * dx + conics[i, 1] * dy)
                                g_means[i, 1] += gp * (conics[i, 1] * dx + conics[i, 2] * dy)
                                g_conics[i, 0] += -0.5 * gp * dx * dx
                                g_conics[i, 1] += -gp * dx * dy
                                g_conics[i, 2] += -0.5 * gp * dy * dy
    return g_means, g_conics, g_opac, g_colors


def _rasterize(pr, H, W, background):
    offsets, ids = _bin_tiles(pr, H, W, TILE_SIZE)
    bg = np.asarray(background, dtype=np.float64)
    c, d, T, n = _forward_kernel(offsets, ids, pr.means, pr.radii, pr.conics, pr.opacities, pr.colors,
                                 pr.p_cam[:, 2], bg, H, W, TILE_SIZE, MIN_ALPHA,
                                 MIN_TRANSMITTANCE)
    return RenderOutput(c, 1.0 - T, d, T, n), (offsets, ids)


def render(scene, cam, background=(0.0, 0.0, 0.0)):
    k = cam.intrinsics
    pr = _project_scene(scene, cam)
    out, _ = _rasterize(pr, k.height, k.width, background)
    return out


def _splat_backward(pr, bins, cam, upstream, background):
    k = cam.intrinsics
    offsets, ids = bins
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (k.height, k.width, 3):
        raise ValueError(f"upstream gradient shape {upstream.shape} != {(k.height, k.width, 3)}")
    return _backward_kernel(offsets, ids, pr.means, pr.radii, pr.conics, pr.opacities, pr.colors,
                            np.asarray(background, dtype=np.float64), upstream,
                            k.height, k.width, TILE_SIZE, MIN_ALPHA, MIN_TRANSMITTANCE,
                            len(pr.means))


def _chain_to_camera_space(pr, coeffs, g_means, g_conics, g_colors, cam):
    """Gradients w.r.t. camera-space centres, camera-space covariance and
    world-space view directions, plus SH coefficient gradients."""
    k = cam.intrinsics
    vis = pr.visible[:, None]
    g_means = np.where(vis, g_means, 0.0)
    g_conics = np.where(vis, g_conics, 0.0)
    g_colors = np.where(vis, g_colors, 0.0)

    # conic (a, b, c) -> full symmetric matrix gradient -> covariance
    GA = np.empty((len(g_means), 2, 2))
    GA[:, 0, 0] = g_conics[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * g_conics[:, 1]
    GA[:, 1, 1] = g_conics[:, 2]
    A = np.empty_like(GA)
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = (pr.conics[:, 0], pr.conics[:, 1],
                                                      pr.conics[:, 1], pr.conics[:, 2])
    Gcov = -A @ GA @ A

    J, V = pr.J, pr.V
    Jt = J.transpose(0, 2, 1)
    GV = Jt @ Gcov @ J
    GJ = 2.0 * Gcov @ J @ V
    x, y, z = pr.p_cam[:, 0], pr.p_cam[:, 1], np.where(pr.visible, pr.p_cam[:, 2], 1.0)
    g_p = np.einsum("nij,ni->nj", J, g_means)
    g_p[:, 0] += GJ[:, 0, 2] * (-k.fx / z**2)
    g_p[:, 1] += GJ[:, 1, 2] * (-k.fy / z**2)
    g_p[:, 2] += (GJ[:, 0, 0] * (-k.fx / z**2) + GJ[:, 0, 2] * (2 * k.fx * x / z**3)
                  + GJ[:, 1, 1] * (-k.fy / z**2) + GJ[:, 1, 2] * (2 * k.fy * y / z**3))

    inside = (pr.raw_color > 0.0) & (pr.raw_color < 1.0)
    g_raw = g_colors * inside
    g_coeffs = np.einsum("nk,nc->nkc", pr.basis, g_raw)
    degree = sh.degree_from_coeffs(coeffs.shape[1])
    if degree > 0:
        n_dir = pr.dirs / pr.dir_norm[:, None]
        dY = sh.sh_basis_grad(n_dir, degree)
        g_n = np.einsum("nc,nkc,nkd->nd", g_raw, coeffs, dY)
        g_dir = (g_n - n_dir * np.sum(g_n * n_dir, axis=1, keepdims=True)) / pr.dir_norm[:, None]
    else:
        g_dir = np.zeros_like(pr.dirs)
    return g_p, GV, g_dir, g_coeffs


def render_with_param_gradients(scene, cam, upstream, background=(0.0, 0.0, 0.0)):
    """Render and back-propagate ``upstream = dL/d(colour image)``.

    Returns ``(RenderOutput, ParamGradients)``; gradients are with respect to
    the stored fields (centre, opacity, quaternion as given, scale, SH).
    """
    return _param_gradients_arrays(scene.centers, scene.opacities, scene.rotations,
                                   scene.scales, scene.sh, cam, upstream, background)


def _param_gradients_arrays(centers, opacities, rotations, scales, coeffs, cam, upstream,
                            background=(0.0, 0.0, 0.0)):
    k = cam.intrinsics
    pr = _project_arrays(centers, opacities, rotations, scales, coeffs, cam)
    out, bins = _rasterize(pr, k.height, k.width, background)
    g_means, g_conics, g_opac, g_colors = _splat_backward(pr, bins, cam, upstream, background)
    g_p, GV, g_dir, g_coeffs = _chain_to_camera_space(pr, coeffs, g_means, g_conics,
                                                      g_colors, cam)
    Rc = cam.pose.rotation
    g_centers = g_p @ Rc + g_dir

    G_sigma = Rc.T @ GV @ Rc
    G_M3 = (G_sigma + G_sigma.transpose(0, 2, 1)) @ pr.M3
    g_scales = np.einsum("nij,nij->nj", G_M3, pr.Rq)
    G_Rq = G_M3 * scales[:, None, :]
    g_qn = np.einsum("nij,nijk->nk", G_Rq, lie.quat_to_rotmat_jacobian(pr.qn))
    g_q = (g_qn - pr.qn * np.sum(g_qn * pr.qn, axis=1, keepdims=True)) / pr.qnorm[:, None]

    vis = pr.visible
    grads = ParamGradients(
        centers=np.where(vis[:, None], g_centers, 0.0),
        opacities=np.where(vis, g_opac, 0.0),
        rotations=np.where(vis[:, None], g_q, 0.0),
        scales=np.where(vis[:, None], g_scales, 0.0),
        sh=np.where(vis[:, None, None], g_coeffs, 0.0),
    )
    return out, grads


def _vee_antisym(A):
    """``<hat(e_k), A>`` for k = x, y, z, summed over a batch of 3x3 matrices."""
    return np.array([np.sum(A[:, 2, 1] - A[:, 1, 2]),
                     np.sum(A[:, 0, 2] - A[:, 2, 0]),
                     np.sum(A[:, 1, 0] - A[:, 0, 1])])


def render_with_pose_gradient(scene, cam, upstream, background=(0.0, 0.0, 0.0)):
    """Render and return ``(RenderOutput, dL/dxi)`` for ``exp(xi) * cam.pose``."""
    out, _, g = pose_loss_and_gradient(scene, cam, lambda img: (0.0, upstream), background)
    return out, g


def pose_loss_and_gradient(scene, cam, loss_fn, background=(0.0, 0.0, 0.0)):
    """One forward pass, an image-space loss, and the analytic pose backward.

    ``loss_fn(color) -> (loss, dloss/dcolor)``.  Returns
    ``(RenderOutput, loss, dloss/dxi)``.
    """
    k = cam.intrinsics
    pr = _project_scene(scene, cam)
    out, bins = _rasterize(pr, k.height, k.width, background)
    loss, upstream = loss_fn(out.color)
    g_means, g_conics, g_opac, g_colors = _splat_backward(pr, bins, cam, upstream, background)
    g_p, GV, g_dir, _ = _chain_to_camera_space(pr, scene.sh, g_means, g_conics, g_colors, cam)
    vis = pr.visible[:, None]
    g_p = np.where(vis, g_p, 0.0)
    g_dir = np.where(vis, g_dir, 0.0)
    Rc = cam.pose.rotation
    g_rho = g_p.sum(axis=0) + Rc @ g_dir.sum(axis=0)
    g_phi = np.cross(pr.p_cam, g_p).sum(axis=0)
    V = pr.V
    g_phi += _vee_antisym(GV @ V - V @ GV)
    return out, loss, np.concatenate([g_rho, g_phi])
