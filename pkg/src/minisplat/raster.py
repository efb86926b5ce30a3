"""Tile-based CPU Gaussian rasterizer.

Per pixel, Gaussians are blended front to back in center-depth order with
the 3DGS rules: a contribution is skipped when its alpha is below 1/255 or
the pixel lies outside the Gaussian's 3-sigma ellipse, alpha is clamped to
0.99, and blending stops before a contribution would push transmittance
below 1e-4. Besides color, the pass records the max-weight Gaussian per
pixel and per-Gaussian accumulators used for densification and pruning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import Camera, GaussianSet

log = logging.getLogger(__name__)

TILE_SIZE = 16
NEAR_PLANE = 0.2
LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_CUTOFF_SQ = 9.0


@dataclass
class Projection:
    """Screen-space footprint of every Gaussian for one camera."""

    valid: np.ndarray      # (N,) bool
    means2d: np.ndarray    # (N, 2) pixels
    cov2d: np.ndarray      # (N, 3) a, b, c of [[a, b], [b, c]]
    conic: np.ndarray      # (N, 3) inverse of cov2d, same packing
    depths: np.ndarray     # (N,) camera z
    radii: np.ndarray      # (N,) pixels, 0 where invalid
    t_cam: np.ndarray      # (N, 3)
    J: np.ndarray          # (N, 2, 3)
    cov3d: np.ndarray      # (N, 3, 3)
    num_degenerate: int = 0

    def __len__(self):
        return len(self.valid)


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray    # (tiles + 1,)
    gauss_ids: np.ndarray  # Gaussian index per entry, depth-sorted within each tile

    def tile_entries(self, tile: int) -> np.ndarray:
        return self.gauss_ids[self.offsets[tile]:self.offsets[tile + 1]]


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    with_depth: bool = False
    with_area: bool = False
    tile_size: int = TILE_SIZE


@dataclass
class RenderOutputs:
    color: np.ndarray          # (H, W, 3)
    alpha: np.ndarray          # (H, W) accumulated opacity
    i_max: np.ndarray          # (H, W) int64, -1 for background
    w_max: np.ndarray          # (H, W)
    max_contrib: np.ndarray    # (N,) S_i, pixels owned as argmax
    weight_sum: np.ndarray     # (N,) sum of blending weights over pixels
    area: np.ndarray | None    # (N,) pixels inside the 3-sigma footprint
    depth: np.ndarray | None   # (H, W) mid-point depth, 0 where invalid
    projection: Projection
    bins: TileBins
    colors: np.ndarray         # (N, 3) per-Gaussian colors used for this view
    background: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha


def projection_jacobian(t_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of (fx x/z, fy y/z) at camera-space points, shape (N, 2, 3)."""
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    J = np.zeros((len(t_cam), 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / (tz * tz)
    return J


def project(gs: GaussianSet, cam: Camera, near: float = NEAR_PLANE) -> Projection:
    """EWA projection of every Gaussian; entries behind ``near`` are invalid."""
    n = len(gs)
    t_cam = cam.world_to_camera(gs.means)
    depths = t_cam[:, 2].copy()
    valid = depths > near
    safe = np.where(valid[:, None], t_cam, np.array([0.0, 0.0, 1.0]))
    J = projection_jacobian(safe, cam.fx, cam.fy)
    cov3d = gs.covariances()
    T = J @ cam.R
    cov = T @ cov3d @ np.swapaxes(T, 1, 2)
    a = cov[:, 0, 0] + LOWPASS
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + LOWPASS
    det = a * c - b * b
    degenerate = valid & ~(det > 0)
    valid &= ~degenerate
    det_safe = np.where(valid, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], 1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.where(valid, np.maximum(3.0 * np.sqrt(np.maximum(lam_max, 0.0)), 1.0), 0.0)
    means2d = np.stack([cam.fx * safe[:, 0] / safe[:, 2] + cam.cx,
                        cam.fy * safe[:, 1] / safe[:, 2] + cam.cy], 1)
    if degenerate.any():
        log.debug("excluded %d degenerate Gaussians", int(degenerate.sum()))
    return Projection(valid, means2d, np.stack([a, b, c], 1), conic, depths, radii,
                      t_cam, J, cov3d, int(degenerate.sum()))


def bin_tiles(proj: Projection, width: int, height: int, tile_size: int = TILE_SIZE) -> TileBins:
    """Assign each valid Gaussian to every tile its 3-sigma box overlaps; sort by (depth, index)."""
    tx_n = (width + tile_size - 1) // tile_size
    ty_n = (height + tile_size - 1) // tile_size
    idx = np.nonzero(proj.valid)[0]
    m, r = proj.means2d[idx], proj.radii[idx]
    x0 = np.floor((m[:, 0] - r) / tile_size)
    x1 = np.floor((m[:, 0] + r) / tile_size)
    y0 = np.floor((m[:, 1] - r) / tile_size)
    y1 = np.floor((m[:, 1] + r) / tile_size)
    keep = (x1 >= 0) & (x0 < tx_n) & (y1 >= 0) & (y0 < ty_n)
    idx = idx[keep]
    x0 = np.clip(x0[keep], 0, tx_n - 1).astype(np.int64)
    x1 = np.clip(x1[keep], 0, tx_n - 1).astype(np.int64)
    y0 = np.clip(y0[keep], 0, ty_n - 1).astype(np.int64)
    y1 = np.clip(y1[keep], 0, ty_n - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = x0[owner] + local % nx[owner]
    tile_y = y0[owner] + local // nx[owner]
    tile_id = tile_y * tx_n + tile_x
    gid = idx[owner]
    order = np.lexsort((gid, proj.depths[gid], tile_id))
    tile_id, gid = tile_id[order], gid[order]
    offsets = np.zeros(tx_n * ty_n + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tx_n * ty_n), out=offsets[1:])
    return TileBins(tile_size, tx_n, ty_n, offsets, np.ascontiguousarray(gid, dtype=np.int64))


@numba.njit(cache=True)
def _forward_kernel(offsets, gids, means2d, conic, opac, colors, bg, H, W, tile, tiles_x,
                    out_color, out_alpha, out_imax, out_wmax, max_contrib, weight_sum):
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        start, end = offsets[t], offsets[t + 1]
        ty0 = (t // tiles_x) * tile
        tx0 = (t % tiles_x) * tile
        for py in range(ty0, min(ty0 + tile, H)):
            for px in range(tx0, min(tx0 + tile, W)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                best = -1
                best_w = 0.0
                for k in range(start, end):
                    i = gids[k]
                    dx = fx - means2d[i, 0]
                    dy = fy - means2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0 or -2.0 * power > 9.0:
                        continue
                    alpha = min(0.99, opac[i] * np.exp(power))
                    if alpha < 1.0 / 255.0:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < 1e-4:
                        break
                    w = alpha * T
                    r += w * colors[i, 0]
                    g += w * colors[i, 1]
                    b += w * colors[i, 2]
                    weight_sum[i] += w
                    if w > best_w:
                        best_w = w
                        best = i
                    T = test_T
                out_color[py, px, 0] = r + T * bg[0]
                out_color[py, px, 1] = g + T * bg[1]
                out_color[py, px, 2] = b + T * bg[2]
                out_alpha[py, px] = 1.0 - T
                out_imax[py, px] = best
                out_wmax[py, px] = best_w
                if best >= 0:
                    max_contrib[best] += 1


@numba.njit(cache=True)
def _area_kernel(offsets, gids, means2d, conic, H, W, tile, tiles_x, area):
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        ty0 = (t // tiles_x) * tile
        tx0 = (t % tiles_x) * tile
        for k in range(offsets[t], offsets[t + 1]):
            i = gids[k]
            for py in range(ty0, min(ty0 + tile, H)):
                for px in range(tx0, min(tx0 + tile, W)):
                    dx = px + 0.5 - means2d[i, 0]
                    dy = py + 0.5 - means2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power <= 0.0 and -2.0 * power <= 9.0:
                        area[i] += 1


@numba.njit(cache=True)
def _backward_kernel(offsets, gids, means2d, conic, opac, colors, bg, H, W, tile, tiles_x,
                     dL_dcolor, g_mean2d, g_conic, g_opac, g_color):
    n_tiles = offsets.shape[0] - 1
    max_len = 0
    for t in range(n_tiles):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    c_idx = np.empty(max_len, dtype=np.int64)
    c_alpha = np.empty(max_len)
    c_T = np.empty(max_len)
    c_G = np.empty(max_len)
    c_dx = np.empty(max_len)
    c_dy = np.empty(max_len)
    c_clamped = np.empty(max_len, dtype=np.bool_)
    for t in range(n_tiles):
        start, end = offsets[t], offsets[t + 1]
        ty0 = (t // tiles_x) * tile
        tx0 = (t % tiles_x) * tile
        for py in range(ty0, min(ty0 + tile, H)):
            for px in range(tx0, min(tx0 + tile, W)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                n = 0
                for k in range(start, end):
                    i = gids[k]
                    dx = fx - means2d[i, 0]
                    dy = fy - means2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0 or -2.0 * power > 9.0:
                        continue
                    G = np.exp(power)
                    raw = opac[i] * G
                    alpha = min(0.99, raw)
                    if alpha < 1.0 / 255.0:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < 1e-4:
                        break
                    c_idx[n] = i
                    c_alpha[n] = alpha
                    c_T[n] = T
                    c_G[n] = G
                    c_dx[n] = dx
                    c_dy[n] = dy
                    c_clamped[n] = raw > 0.99
                    n += 1
                    T = test_T
                gr = dL_dcolor[py, px, 0]
                gg = dL_dcolor[py, px, 1]
                gb = dL_dcolor[py, px, 2]
                # suffix color behind the current contribution, per unit transmittance
                sr = bg[0]
                sg = bg[1]
                sb = bg[2]
                for j in range(n - 1, -1, -1):
                    i = c_idx[j]
                    a = c_alpha[j]
                    Tj = c_T[j]
                    w = a * Tj
                    g_color[i, 0] += w * gr
                    g_color[i, 1] += w * gg
                    g_color[i, 2] += w * gb
                    d_alpha = Tj * ((colors[i, 0] - sr) * gr + (colors[i, 1] - sg) * gg
                                    + (colors[i, 2] - sb) * gb)
                    sr = a * colors[i, 0] + (1.0 - a) * sr
                    sg = a * colors[i, 1] + (1.0 - a) * sg
                    sb = a * colors[i, 2] + (1.0 - a) * sb
                    if c_clamped[j]:
                        continue
                    G = c_G[j]
                    g_opac[i] += d_alpha * G
                    d_power = d_alpha * opac[i] * G
                    dx = c_dx[j]
                    dy = c_dy[j]
                    g_conic[i, 0] += -0.5 * dx * dx * d_power
                    g_conic[i, 1] += -dx * dy * d_power
                    g_conic[i, 2] += -0.5 * dy * dy * d_power
                    # d(dx)/d(mean_x) = -1
                    g_mean2d[i, 0] += (conic[i, 0] * dx + conic[i, 1] * dy) * d_power
                    g_mean2d[i, 1] += (conic[i, 2] * dy + conic[i, 1] * dx) * d_power


def render(gs: GaussianSet, cam: Camera, options: RenderOptions | None = None,
           override_colors: np.ndarray | None = None) -> RenderOutputs:
    """Rasterize ``gs`` from ``cam``; see module docstring for the blending rules.

    ``override_colors`` replaces the SH colors (e.g. to blend depths).
    """
    opts = options or RenderOptions()
    H, W = cam.height, cam.width
    n = len(gs)
    bg = np.asarray(opts.background, dtype=np.float64)
    proj = project(gs, cam)
    bins = bin_tiles(proj, W, H, opts.tile_size)
    if override_colors is None:
        colors = np.ascontiguousarray(gs.colors(cam.center))
    else:
        colors = np.ascontiguousarray(override_colors, dtype=np.float64).reshape(n, 3)
    opac = np.ascontiguousarray(gs.opacities)
    color = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    i_max = np.empty((H, W), dtype=np.int64)
    w_max = np.empty((H, W))
    max_contrib = np.zeros(n, dtype=np.int64)
    weight_sum = np.zeros(n)
    _forward_kernel(bins.offsets, bins.gauss_ids, proj.means2d, proj.conic, opac, colors, bg,
                    H, W, bins.tile_size, bins.tiles_x, color, alpha, i_max, w_max,
                    max_contrib, weight_sum)
    area = None
    if opts.with_area:
        area = np.zeros(n, dtype=np.int64)
        _area_kernel(bins.offsets, bins.gauss_ids, proj.means2d, proj.conic, H, W,
                     bins.tile_size, bins.tiles_x, area)
    out = RenderOutputs(color, alpha, i_max, w_max, max_contrib, weight_sum, area, None,
                        proj, bins, colors, bg)
    if opts.with_depth:
        from .depth import midpoint_depth_map
        out.depth, out.stats["depth_miss_rate"] = midpoint_depth_map(gs, cam, out, return_miss_rate=True)
    return out


@dataclass
class ScreenGradients:
    mean2d: np.ndarray   # (N, 2)
    conic: np.ndarray    # (N, 3) w.r.t. the scalars (A, B, C) of the conic packing
    opacity: np.ndarray  # (N,) w.r.t. activated opacity
    color: np.ndarray    # (N, 3)


def backward_screen(out: RenderOutputs, opac: np.ndarray, dL_dcolor: np.ndarray) -> ScreenGradients:
    """Adjoint of the blend: image-space gradient to per-Gaussian screen-space gradients."""
    proj, bins = out.projection, out.bins
    H, W = dL_dcolor.shape[:2]
    n = len(proj)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    _backward_kernel(bins.offsets, bins.gauss_ids, proj.means2d, proj.conic,
                     np.ascontiguousarray(opac), out.colors, out.background, H, W,
                     bins.tile_size, bins.tiles_x, np.ascontiguousarray(dL_dcolor, dtype=np.float64),
                     g_mean2d, g_conic, g_opac, g_color)
    return ScreenGradients(g_mean2d, g_conic, g_opac, g_color)


def index_colors(indices: np.ndarray, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random RGB (uint8) per integer index; -1 maps to black."""
    idx = np.asarray(indices, dtype=np.int64)
    # splitmix64 finalizer; uint64 arithmetic wraps by design
    with np.errstate(over="ignore"):
        h = idx.astype(np.uint64) + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
        h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(31))
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], -1).astype(np.uint8)
    rgb[idx < 0] = 0
    return rgb


def render_index_visualization(out: RenderOutputs, seed: int = 0) -> np.ndarray:
    """Map the max-contribution index map to random colors (uint8 H x W x 3)."""
    return index_colors(out.i_max, seed)
