"""Brute-force reference renderer.

Every pixel sees every valid Gaussian, globally sorted by (center depth,
index); no tiles. Skip and termination rules match :mod:`minisplat.raster`
so that results must agree. Used as a test oracle and to render synthetic
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianSet
from .raster import ALPHA_MAX, ALPHA_MIN, SIGMA_CUTOFF_SQ, T_MIN, project


@dataclass
class ReferenceImage:
    color: np.ndarray
    alpha: np.ndarray
    i_max: np.ndarray
    w_max: np.ndarray
    weight_sum: np.ndarray
    max_contrib: np.ndarray
    # per-Gaussian pixel weights are only kept when requested
    weights: np.ndarray | None = None


def render_reference(gs: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0),
                     keep_weights: bool = False) -> ReferenceImage:
    H, W = cam.height, cam.width
    n = len(gs)
    proj = project(gs, cam)
    colors = gs.colors(cam.center)
    opac = gs.opacities
    u, v = cam.pixel_grid()
    u, v = u.ravel(), v.ravel()
    P = u.size
    T = np.ones(P)
    done = np.zeros(P, dtype=bool)
    color = np.zeros((P, 3))
    i_max = np.full(P, -1, dtype=np.int64)
    w_max = np.zeros(P)
    weight_sum = np.zeros(n)
    weights = np.zeros((n, P)) if keep_weights else None
    order = np.lexsort((np.arange(n), proj.depths))
    for i in order:
        if not proj.valid[i]:
            continue
        dx = u - proj.means2d[i, 0]
        dy = v - proj.means2d[i, 1]
        A, B, C = proj.conic[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        inside = (power <= 0.0) & (-2.0 * power <= SIGMA_CUTOFF_SQ) & ~done
        if not inside.any():
            continue
        alpha = np.minimum(ALPHA_MAX, opac[i] * np.exp(power))
        live = inside & (alpha >= ALPHA_MIN)
        test_T = T * (1.0 - alpha)
        stop = live & (test_T < T_MIN)
        done |= stop
        add = live & ~stop
        w = np.where(add, alpha * T, 0.0)
        color += w[:, None] * colors[i][None, :]
        weight_sum[i] = w.sum()
        if keep_weights:
            weights[i] = w
        better = add & (w > w_max)
        i_max[better] = i
        w_max[better] = w[better]
        T = np.where(add, test_T, T)
    color += T[:, None] * np.asarray(background, dtype=np.float64)[None, :]
    counts = np.bincount(i_max[i_max >= 0], minlength=n).astype(np.int64)
    return ReferenceImage(color.reshape(H, W, 3), (1 - T).reshape(H, W), i_max.reshape(H, W),
                          w_max.reshape(H, W), weight_sum, counts, weights)
