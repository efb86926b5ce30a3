"""Image quality and geometry metrics, plus evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` for identical images."""
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img):
    # separable Gaussian window, zero padding, output aligned with the input
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _as_hwc(img):
    return img[..., None] if img.ndim == 2 else img


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM with an 11x11 sigma-1.5 Gaussian window (zero padded)."""
    a, b = _check_shapes(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    mu1, mu2 = _blur(a), _blur(b)
    s11 = _blur(a * a) - mu1 * mu1
    s22 = _blur(b * b) - mu2 * mu2
    s12 = _blur(a * b) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels."""
    return float(np.mean(ssim_map(a, b)))


def ssim_with_grad(a, b):
    """Mean SSIM and its gradient with respect to ``a``."""
    a, b = _check_shapes(a, b)
    squeeze = a.ndim == 2
    a, b = _as_hwc(a), _as_hwc(b)
    mu1, mu2 = _blur(a), _blur(b)
    s11 = _blur(a * a) - mu1 * mu1
    s22 = _blur(b * b) - mu2 * mu2
    s12 = _blur(a * b) - mu1 * mu2
    A1 = 2 * mu1 * mu2 + SSIM_C1
    A2 = 2 * s12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = s11 + s22 + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    scale = 1.0 / S.size
    # partials of S w.r.t. blur(a), blur(a*a), blur(a*b)
    d_mu1 = (2 * mu2 * (A2 - A1) / (B1 * B2) - 2 * mu1 * S * (1 / B1 - 1 / B2)) * scale
    d_e11 = -S / B2 * scale
    d_e12 = 2 * A1 / (B1 * B2) * scale
    # zero-padded correlation with a symmetric window is self-adjoint
    grad = _blur(d_mu1) + 2 * a * _blur(d_e11) + b * _blur(d_e12)
    if squeeze:
        grad = grad[..., 0]
    return float(S.mean()), grad


def chamfer_distance(a, b) -> float:
    """Mean NN distance from ``a`` to ``b`` plus mean NN distance from ``b`` to ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(d_ab.mean() + d_ba.mean())


@dataclass
class EvalReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    views: list = field(default_factory=list)
    num_gaussians: int = 0
    stage_ms: dict = field(default_factory=dict)
    peak_memory_bytes: int = 0
    lpips: str = "unavailable"

    def add(self, name, rendered, target):
        self.views.append(name)
        self.psnr.append(psnr(rendered, target))
        self.ssim.append(ssim(rendered, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self):
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        d["num_gaussians_millions"] = self.num_gaussians / 1e6
        return d

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "psnr", "ssim", "lpips"])
            for name, p, s in zip(self.views, self.psnr, self.ssim):
                w.writerow([name, f"{p:.6f}", f"{s:.6f}", self.lpips])
