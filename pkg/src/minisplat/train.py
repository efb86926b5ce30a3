"""Photometric loss, analytic gradients through the rasterizer, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SH_C0, Camera, GaussianSet, rotmat_grad_to_quat, sh_basis
from .metrics import ssim_with_grad
from .raster import RenderOptions, RenderOutputs, backward_screen, render

PARAM_GROUPS = ("means", "log_scales", "quats", "opacity_logits", "sh")


def loss(rendered, target, lam: float = 0.2) -> float:
    """(1 - lam) * L1 + lam * (1 - SSIM)."""
    return loss_and_grad(rendered, target, lam)[0]


def loss_and_grad(rendered, target, lam: float = 0.2):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    value = (1.0 - lam) * l1
    if lam > 0:
        s, ds = ssim_with_grad(rendered, target)
        value += lam * (1.0 - s)
        grad = grad - lam * ds
    return value, grad


@dataclass
class ParamGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    # view-space positional gradient norm in NDC units, for adaptive density control
    mean2d_norm: np.ndarray = None
    visible: np.ndarray = None
    radii: np.ndarray = None

    def group(self, name):
        return getattr(self, name)


def gradients_from_screen(gs: GaussianSet, cam: Camera, out: RenderOutputs, screen) -> ParamGradients:
    """Chain per-Gaussian screen-space gradients back to the Gaussian parameters."""
    proj = out.projection
    n = len(gs)
    valid = proj.valid
    g_means = np.zeros((n, 3))
    g_sh = np.zeros_like(gs.sh)

    # color -> SH coefficients (and view direction)
    deg = gs.sh_degree
    if deg == 0:
        g_sh[:, 0, :] = SH_C0 * screen.color
    else:
        v = gs.means - cam.center[None, :]
        vn = np.linalg.norm(v, axis=1, keepdims=True)
        dirs = v / vn
        K = (deg + 1) ** 2
        Y, dY = sh_basis(dirs, deg, with_grad=True)
        g_sh[:, :K, :] = Y[:, :, None] * screen.color[:, None, :]
        # d color / d dir, contracted with d loss / d color
        g_dir = np.einsum("nkc,nc,nkd->nd", gs.sh[:, :K, :], screen.color, dY)
        g_means += (g_dir - dirs * np.sum(g_dir * dirs, axis=1, keepdims=True)) / vn

    # opacity
    o = gs.opacities
    g_logit = screen.opacity * o * (1.0 - o)

    # conic -> 2D covariance
    A, B, C = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    M = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    gA, gB, gC = screen.conic[:, 0], screen.conic[:, 1], screen.conic[:, 2]
    G_M = np.stack([np.stack([gA, 0.5 * gB], -1), np.stack([0.5 * gB, gC], -1)], -2)
    G_cov2 = -M @ G_M @ M

    # 2D covariance = T Sigma T^T with T = J W
    W = cam.R
    J = proj.J
    T = J @ W
    Sigma = proj.cov3d
    G_Sigma = np.swapaxes(T, 1, 2) @ G_cov2 @ T
    G_J = 2.0 * G_cov2 @ T @ Sigma @ W.T

    # J and the 2D mean depend on the camera-space center
    tx, ty, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    tz = np.where(valid, tz, 1.0)
    fx, fy = cam.fx, cam.fy
    gm = screen.mean2d
    g_t = np.zeros((n, 3))
    g_t[:, 0] = gm[:, 0] * fx / tz - G_J[:, 0, 2] * fx / tz ** 2
    g_t[:, 1] = gm[:, 1] * fy / tz - G_J[:, 1, 2] * fy / tz ** 2
    g_t[:, 2] = (-gm[:, 0] * fx * tx / tz ** 2 - gm[:, 1] * fy * ty / tz ** 2
                 - G_J[:, 0, 0] * fx / tz ** 2 + G_J[:, 0, 2] * 2 * fx * tx / tz ** 3
                 - G_J[:, 1, 1] * fy / tz ** 2 + G_J[:, 1, 2] * 2 * fy * ty / tz ** 3)
    g_means += g_t @ W

    # Sigma = (R S)(R S)^T
    R = gs.rotations
    s = gs.scales
    RS = R * s[:, None, :]
    G_RS = 2.0 * G_Sigma @ RS
    G_R = G_RS * s[:, None, :]
    g_s = np.einsum("nij,nij->nj", R, G_RS)
    g_log_scales = g_s * s
    g_quats = rotmat_grad_to_quat(gs.quats, G_R)

    inv = ~valid
    for arr in (g_means, g_log_scales, g_quats, g_logit, g_sh):
        arr[inv] = 0.0
    ndc = np.stack([gm[:, 0] * 0.5 * cam.width, gm[:, 1] * 0.5 * cam.height], 1)
    grads = ParamGradients(g_means, g_log_scales, g_quats, g_logit, g_sh,
                           np.linalg.norm(ndc, axis=1), proj.radii > 0, proj.radii)
    _check_finite(grads)
    return grads


def _check_finite(grads: ParamGradients):
    for name in PARAM_GROUPS:
        g = grads.group(name).reshape(len(grads.means), -1)
        bad = ~np.all(np.isfinite(g), axis=1)
        if bad.any():
            raise FloatingPointError(
                f"non-finite {name} gradient for Gaussian {int(np.nonzero(bad)[0][0])}")


def backward(gs: GaussianSet, cam: Camera, target, lam: float = 0.2, background=(0.0, 0.0, 0.0)):
    """Render, evaluate the loss, and return (loss, ParamGradients, RenderOutputs)."""
    out = render(gs, cam, RenderOptions(background=background))
    value, dL_dimg = loss_and_grad(out.color, target, lam)
    screen = backward_screen(out, gs.opacities, dL_dimg)
    return value, gradients_from_screen(gs, cam, out, screen), out


def exp_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear decay from ``lr_init`` at step 0 to ``lr_final`` at ``max_steps``."""
    if step <= 0 or max_steps <= 0:
        return lr_init
    if step >= max_steps:
        return lr_final
    t = step / max_steps
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    sh_dc: float = 0.0025
    sh_rest: float = 0.0025 / 20
    opacity: float = 0.05
    scaling: float = 0.005
    rotation: float = 0.001


@dataclass
class Adam:
    """Per-group Adam; moments follow the Gaussian set through structural edits."""

    lrs: LearningRates = field(default_factory=LearningRates)
    spatial_scale: float = 1.0
    position_decay_steps: int = 30000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def position_lr(self, step: int) -> float:
        return exp_lr(step, self.lrs.position_init * self.spatial_scale,
                      self.lrs.position_final * self.spatial_scale, self.position_decay_steps)

    def _lr(self, name, step):
        if name == "means":
            return self.position_lr(step)
        if name == "log_scales":
            return self.lrs.scaling
        if name == "quats":
            return self.lrs.rotation
        if name == "opacity_logits":
            return self.lrs.opacity
        raise KeyError(name)

    def _update(self, key, param, grad, lr):
        if key not in self.m or self.m[key].shape != param.shape:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
            self.t[key] = 0
        self.t[key] += 1
        m, v, t = self.m[key], self.v[key], self.t[key]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def step(self, gs: GaussianSet, grads: ParamGradients, step: int) -> None:
        """In-place update of ``gs``; quaternions are renormalized afterwards."""
        for name in ("means", "log_scales", "quats", "opacity_logits"):
            self._update(name, getattr(gs, name), grads.group(name), self._lr(name, step))
        self._update("sh_dc", gs.sh[:, :1, :], grads.sh[:, :1, :], self.lrs.sh_dc)
        self._update("sh_rest", gs.sh[:, 1:, :], grads.sh[:, 1:, :], self.lrs.sh_rest)
        gs.quats /= np.linalg.norm(gs.quats, axis=1, keepdims=True)

    def remap(self, source) -> None:
        """Follow a structural edit: row k of the new set came from old row ``source[k]``,
        or is fresh (zero moments) where ``source[k] < 0``."""
        source = np.asarray(source, dtype=np.int64)
        fresh = source < 0
        src = np.where(fresh, 0, source)
        for d in (self.m, self.v):
            for k in d:
                arr = d[k][src] if len(d[k]) else np.zeros((len(src),) + d[k].shape[1:])
                arr[fresh] = 0.0
                d[k] = arr

    def reset(self) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k][...] = 0.0
        for k in self.t:
            self.t[k] = 0
