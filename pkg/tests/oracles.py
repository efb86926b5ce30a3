"""Independent test oracles: frozen-pattern finite differences, scene generators, plain-loop references."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from minisplat.core import Camera, GaussianSet, quat_to_rotmat
from minisplat.raster import ALPHA_MAX, ALPHA_MIN, SIGMA_CUTOFF_SQ, T_MIN, project
from minisplat.train import loss as photometric_loss


# random scenes ------------------------------------------------------------------


def random_camera(rng, width=32, height=32, radius=4.0, fov=55.0) -> Camera:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = radius * d
    up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return Camera.look_at(eye, np.zeros(3), up, width, height, fov)


def random_gaussians(rng, n, sh_degree=0, spread=1.0, scale_range=(0.05, 0.4), opacity_range=(0.2, 0.95)):
    means = rng.uniform(-spread, spread, (n, 3))
    scales = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3)))
    quats = rng.normal(size=(n, 4))
    opac = rng.uniform(*opacity_range, n)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rng.uniform(-1.5, 1.5, (n, 3))
    k = (sh_degree + 1) ** 2
    sh[:, 1:k, :] = rng.normal(scale=0.3, size=(n, k - 1, 3))
    return GaussianSet.from_activated(means, scales, quats, opac, sh=sh, sh_degree=sh_degree)


# frozen-pattern finite differences ------------------------------------------------


@dataclass
class BlendPattern:
    """Which (Gaussian, pixel) pairs blend, in which order, and which alphas sit on the clamp."""

    order: np.ndarray
    add: dict
    clamped: dict


def blend_pattern(gs: GaussianSet, cam: Camera) -> BlendPattern:
    """Replay the blending rules once, per Gaussian over all pixels, recording the discrete choices."""
    proj = project(gs, cam)
    opac = gs.opacities
    u, v = cam.pixel_grid()
    u, v = u.ravel(), v.ravel()
    T = np.ones(u.size)
    done = np.zeros(u.size, dtype=bool)
    order = np.lexsort((np.arange(len(gs)), proj.depths))
    add, clamped = {}, {}
    for i in order:
        if not proj.valid[i]:
            continue
        dx = u - proj.means2d[i, 0]
        dy = v - proj.means2d[i, 1]
        A, B, C = proj.conic[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        inside = (power <= 0.0) & (-2.0 * power <= SIGMA_CUTOFF_SQ) & ~done
        raw = opac[i] * np.exp(power)
        alpha = np.minimum(ALPHA_MAX, raw)
        live = inside & (alpha >= ALPHA_MIN)
        test_T = T * (1.0 - alpha)
        stop = live & (test_T < T_MIN)
        done |= stop
        a = live & ~stop
        if a.any():
            add[int(i)] = a
            clamped[int(i)] = raw > ALPHA_MAX
        T = np.where(a, test_T, T)
    return BlendPattern(order, add, clamped)


def frozen_render(gs: GaussianSet, cam: Camera, pattern: BlendPattern, background=(0.0, 0.0, 0.0)):
    """Blend with the discrete structure of ``pattern``; smooth in every continuous parameter."""
    proj = project(gs, cam)
    colors = gs.colors(cam.center)
    opac = gs.opacities
    u, v = cam.pixel_grid()
    u, v = u.ravel(), v.ravel()
    T = np.ones(u.size)
    out = np.zeros((u.size, 3))
    for i in pattern.order:
        i = int(i)
        if i not in pattern.add:
            continue
        m = pattern.add[i]
        dx = u[m] - proj.means2d[i, 0]
        dy = v[m] - proj.means2d[i, 1]
        A, B, C = proj.conic[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        alpha = np.where(pattern.clamped[i][m], ALPHA_MAX, opac[i] * np.exp(power))
        out[m] += (alpha * T[m])[:, None] * colors[i][None, :]
        T[m] = T[m] * (1.0 - alpha)
    out += T[:, None] * np.asarray(background, dtype=np.float64)[None, :]
    return out.reshape(cam.height, cam.width, 3)


def frozen_loss(gs, cam, pattern, target, lam=0.2, background=(0.0, 0.0, 0.0), signs=None) -> float:
    """Photometric loss on the frozen blend; ``signs`` also freezes the L1 kink at zero residual."""
    img = frozen_render(gs, cam, pattern, background)
    if signs is None:
        return photometric_loss(img, target, lam)
    l1 = np.mean(signs * (img - target))
    return (1 - lam) * l1 + lam * (photometric_loss(img, target, 1.0) if lam > 0 else 0.0)


def fd_entries(gs: GaussianSet, cam, target, group: str, entries, h=1e-4, lam=0.2,
               background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Central differences of the frozen-pattern loss for flat ``entries`` of a parameter group."""
    pattern = blend_pattern(gs, cam)
    signs = np.sign(frozen_render(gs, cam, pattern, background) - target)
    out = np.zeros(len(entries))
    for k, e in enumerate(entries):
        vals = []
        for sign in (1.0, -1.0):
            g = gs.copy()
            arr = getattr(g, group)
            arr.reshape(-1)[e] += sign * h
            vals.append(frozen_loss(g, cam, pattern, target, lam, background, signs))
        out[k] = (vals[0] - vals[1]) / (2 * h)
    return out


def fd_matches(analytic, numeric, rel=1e-3, abs_=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) <= abs_ + rel * np.abs(numeric)


# geometry oracles ---------------------------------------------------------------


def density_argmax_t(center, scale, quat, origin, direction):
    """Ray parameter maximizing the Gaussian density, from the world-space precision matrix."""
    R = quat_to_rotmat(quat)
    prec = R @ np.diag(1.0 / np.asarray(scale) ** 2) @ R.T
    o = np.asarray(origin) - np.asarray(center)
    d = np.asarray(direction)
    # density ~ exp(Bt + Ct^2) with B = -d' P o, C = -d' P d / 2
    B = -d @ prec @ o
    C = -0.5 * d @ prec @ d
    return -B / (2.0 * C)


def morton_by_bits(cell, depth):
    """Bit-by-bit Morton code (x in the lowest bit of each triple)."""
    code = 0
    for bit in range(depth):
        for axis in range(3):
            code |= ((int(cell[axis]) >> bit) & 1) << (3 * bit + axis)
    return code


def naive_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def naive_ssim(a, b):
    """Per-channel SSIM with an explicit 11x11 window loop over a zero-padded image."""
    from minisplat.metrics import SSIM_C1, SSIM_C2
    x = np.arange(11) - 5
    g = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    H, W, Cn = a.shape
    pa = np.pad(a, ((5, 5), (5, 5), (0, 0)))
    pb = np.pad(b, ((5, 5), (5, 5), (0, 0)))
    vals = np.zeros((H, W, Cn))
    for y in range(H):
        for xx in range(W):
            wa = pa[y:y + 11, xx:xx + 11]
            wb = pb[y:y + 11, xx:xx + 11]
            mu1 = np.einsum("ij,ijc->c", w, wa)
            mu2 = np.einsum("ij,ijc->c", w, wb)
            s11 = np.einsum("ij,ijc->c", w, wa * wa) - mu1 ** 2
            s22 = np.einsum("ij,ijc->c", w, wb * wb) - mu2 ** 2
            s12 = np.einsum("ij,ijc->c", w, wa * wb) - mu1 * mu2
            vals[y, xx] = ((2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
                           / ((mu1 ** 2 + mu2 ** 2 + SSIM_C1) * (s11 + s22 + SSIM_C2)))
    return vals.mean()
