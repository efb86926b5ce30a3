"""Ray/ellipsoid mid-point depth, the three depth-map formulations, and depth point clouds."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianSet, quat_to_rotmat

log = logging.getLogger(__name__)


class NoValidDepthError(RuntimeError):
    pass


@dataclass
class RayEllipsoidHit:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    disc: np.ndarray
    t_mid: np.ndarray
    hit: np.ndarray
    p_mid: np.ndarray


def ray_ellipsoid_midpoint(center, scale, quat, origin, direction) -> RayEllipsoidHit:
    """Mid-point between the two intersections of a ray with the 1-sigma ellipsoid.

    All arguments broadcast: ``center``/``scale``/``origin``/``direction`` are
    (..., 3), ``quat`` is (..., 4). Inputs are world-space; the ray is moved
    into the ellipsoid frame before forming the quadratic a t^2 + b t + c = 0.
    ``t_mid`` = -b / (2a) is defined even when the ray misses (disc < 0).
    """
    direction = np.asarray(direction, dtype=np.float64)
    if np.any(np.linalg.norm(direction, axis=-1) == 0):
        raise ValueError("ray direction must be nonzero")
    origin = np.asarray(origin, dtype=np.float64)
    R = quat_to_rotmat(quat)
    # world -> local is R^T applied to row vectors
    o = np.einsum("...ji,...j->...i", R, origin - np.asarray(center, dtype=np.float64))
    d = np.einsum("...ji,...j->...i", R, direction)
    inv_s2 = 1.0 / np.square(np.asarray(scale, dtype=np.float64))
    a = np.sum(d * d * inv_s2, axis=-1)
    b = 2.0 * np.sum(o * d * inv_s2, axis=-1)
    c = np.sum(o * o * inv_s2, axis=-1) - 1.0
    disc = b * b - 4.0 * a * c
    t_mid = -b / (2.0 * a)
    p_mid = origin + t_mid[..., None] * direction
    return RayEllipsoidHit(a, b, c, disc, t_mid, disc >= 0, p_mid)


def midpoint_depth_map(gs: GaussianSet, cam: Camera, outputs, return_miss_rate=False):
    """Camera-z of the mid-point on the max-contribution Gaussian for each pixel.

    Pixels whose ray misses that Gaussian's 1-sigma ellipsoid fall back to
    the Gaussian's center depth. Background pixels get 0.
    """
    i_max = outputs.i_max
    depth = np.zeros(i_max.shape)
    fg = i_max >= 0
    miss_rate = 0.0
    if fg.any():
        origin, dirs = cam.pixel_rays()
        ids = i_max[fg]
        hit = ray_ellipsoid_midpoint(gs.means[ids], gs.scales[ids], gs.quats[ids],
                                     origin[None, :], dirs[fg])
        # ray directions have unit camera-z and start at the camera, so t is camera-z
        d_center = outputs.projection.depths[ids]
        depth[fg] = np.where(hit.hit, hit.t_mid, d_center)
        miss_rate = float(np.mean(~hit.hit))
        log.debug("mid-point depth: %.1f%% of foreground rays miss the ellipsoid", 100 * miss_rate)
    if return_miss_rate:
        return depth, miss_rate
    return depth


def center_depth_map(outputs) -> np.ndarray:
    """Center depth of the max-contribution Gaussian; 0 for background."""
    i_max = outputs.i_max
    depth = np.zeros(i_max.shape)
    fg = i_max >= 0
    depth[fg] = outputs.projection.depths[i_max[fg]]
    return depth


def blend_depth_map(gs: GaussianSet, cam: Camera) -> np.ndarray:
    """Alpha-blended center depth, sum_i w_i d_i, with the color blending weights."""
    from .raster import render

    d = cam.world_to_camera(gs.means)[:, 2]
    out = render(gs, cam, override_colors=np.repeat(d[:, None], 3, axis=1))
    return out.color[..., 0]


@dataclass
class DepthPointCloud:
    points: np.ndarray   # (M, 3) world
    colors: np.ndarray   # (M, 3) in [0, 1]
    view_ids: np.ndarray  # (M,)

    def __len__(self):
        return len(self.points)


def unproject_depth(cam: Camera, depth: np.ndarray, mask=None):
    """World points for pixels with positive depth; returns (points, rows, cols)."""
    valid = depth > 0 if mask is None else mask & (depth > 0)
    rows, cols = np.nonzero(valid)
    pts = cam.unproject(cols + 0.5, rows + 0.5, depth[rows, cols])
    return pts, rows, cols


def reproject_and_merge(views, target_count: int, seed=0) -> DepthPointCloud:
    """Merge per-view depth maps into one colored world-space cloud of about ``target_count`` points.

    ``views`` is a sequence of (camera, depth map, ground-truth image). The
    budget is split evenly across views and each view draws uniformly
    without replacement from its valid pixels.
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    rng = np.random.default_rng(seed)
    views = list(views)
    quota = np.full(len(views), target_count // len(views))
    quota[: target_count % len(views)] += 1
    pts, cols, vid = [], [], []
    for k, (cam, depth, image) in enumerate(views):
        p, rows, cols_ = unproject_depth(cam, depth)
        if len(p) == 0:
            continue
        take = min(int(quota[k]), len(p))
        sel = np.sort(rng.choice(len(p), size=take, replace=False))
        pts.append(p[sel])
        cols.append(np.clip(np.asarray(image)[rows[sel], cols_[sel], :3], 0.0, 1.0))
        vid.append(np.full(take, k, dtype=np.int64))
    if not pts:
        raise NoValidDepthError("no valid depth in any view")
    return DepthPointCloud(np.concatenate(pts), np.concatenate(cols), np.concatenate(vid))
