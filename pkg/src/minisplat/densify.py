"""Densification: blur split, 3DGS clone/split/prune control, and depth reinitialization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianSet, logit, rgb_to_sh_dc
from .depth import NoValidDepthError, midpoint_depth_map, reproject_and_merge
from .raster import render

log = logging.getLogger(__name__)

SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class DensifyConfig:
    theta_blur: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    max_screen_size: float = 20.0
    opacity_reset_interval: int = 3000
    reinit_interval: int = 5000
    reinit_points: int = 100_000
    reinit_replace: bool = True
    reinit_opacity: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.theta_blur < 1.0:
            raise ValueError("theta_blur must lie in (0, 1)")
        for name in ("densify_interval", "reinit_interval", "opacity_reset_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def blur_threshold(height: int, width: int, theta_blur: float) -> float:
    return theta_blur * height * width


def select_blur_gaussians(outputs, cam: Camera, cfg: DensifyConfig | float) -> np.ndarray:
    """Indices whose max-contribution area strictly exceeds theta_blur * H * W."""
    theta = cfg.theta_blur if isinstance(cfg, DensifyConfig) else float(cfg)
    return np.nonzero(outputs.max_contrib > blur_threshold(cam.height, cam.width, theta))[0]


def split_children(gs: GaussianSet, idx, rng: np.random.Generator) -> GaussianSet:
    """Two children per parent: centers drawn from the parent, scales / 1.6, rest copied."""
    idx = np.asarray(idx, dtype=np.int64)
    parents = gs.take(np.repeat(idx, SPLIT_CHILDREN))
    s = parents.scales
    offsets = rng.standard_normal((len(parents), 3)) * s
    parents.means = parents.means + np.einsum("nij,nj->ni", parents.rotations, offsets)
    parents.log_scales = np.log(s / SPLIT_SCALE_DIVISOR)
    return parents


def split_gaussians(gs: GaussianSet, indices, seed=0, return_source=False):
    """Replace each selected Gaussian by two children; kept Gaussians stay in order first."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    indices = np.unique(np.asarray(indices, dtype=np.int64))
    keep = np.ones(len(gs), dtype=bool)
    keep[indices] = False
    kept = np.nonzero(keep)[0]
    out = gs.take(kept).concat(split_children(gs, indices, rng))
    out.sh_degree = gs.sh_degree
    if return_source:
        return out, np.concatenate([kept, np.full(SPLIT_CHILDREN * len(indices), -1)])
    return out


@dataclass
class DensifyStats:
    """Accumulated view-space gradient norms and screen radii since the last control step."""

    grad_accum: np.ndarray
    denom: np.ndarray
    max_radii: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def add(self, grads):
        vis = grads.visible
        self.grad_accum[vis] += grads.mean2d_norm[vis]
        self.denom[vis] += 1
        self.max_radii[vis] = np.maximum(self.max_radii[vis], grads.radii[vis])

    def remap(self, source):
        source = np.asarray(source, dtype=np.int64)
        fresh = source < 0
        src = np.where(fresh, 0, source)
        for name in ("grad_accum", "denom", "max_radii"):
            arr = getattr(self, name)
            new = arr[src] if len(arr) else np.zeros(len(src))
            new[fresh] = 0.0
            setattr(self, name, new)

    def mean_grad(self):
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)


def adaptive_control_step(gs: GaussianSet, stats: DensifyStats, cfg: DensifyConfig,
                          extent: float, seed=0, extra_split=None, prune_large=True,
                          return_source=False):
    """3DGS clone / split / prune, with ``extra_split`` indices (e.g. blur split) forced to split."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(gs)
    grads = stats.mean_grad()
    high = grads >= cfg.grad_threshold
    big = gs.scales.max(axis=1) > cfg.percent_dense * extent
    split = high & big
    if extra_split is not None and len(extra_split):
        split[np.asarray(extra_split, dtype=np.int64)] = True
    clone = high & ~big & ~split

    clone_idx = np.nonzero(clone)[0]
    split_idx = np.nonzero(split)[0]
    keep_idx = np.nonzero(~split)[0]
    out = gs.take(np.concatenate([keep_idx, clone_idx])).concat(split_children(gs, split_idx, rng))
    out.sh_degree = gs.sh_degree
    source = np.concatenate([keep_idx, np.full(len(clone_idx) + SPLIT_CHILDREN * len(split_idx), -1)])

    prune = out.opacities < cfg.min_opacity
    if prune_large:
        radii = np.concatenate([stats.max_radii[keep_idx], np.zeros(len(out) - len(keep_idx))])
        prune |= radii > cfg.max_screen_size
        prune |= out.scales.max(axis=1) > 0.1 * extent
    survivors = np.nonzero(~prune)[0]
    if len(survivors) == 0:
        log.warning("adaptive control would prune every Gaussian; keeping the set unchanged")
        survivors = np.arange(len(out))
    out = out.take(survivors)
    source = source[survivors]
    log.debug("control step: %d clone, %d split, %d pruned, N %d -> %d",
              len(clone_idx), len(split_idx), int(prune.sum()), n, len(out))
    if return_source:
        return out, source
    return out


def nn_scales(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest neighbours, per point."""
    if len(points) < 2:
        return np.full(len(points), 0.01)
    kk = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-7)


def gaussians_from_points(points, colors, opacity=0.1, sh_degree=0) -> GaussianSet:
    """Isotropic Gaussians at ``points`` sized by 3-NN distance, identity rotations."""
    points = np.array(points, dtype=np.float64)
    n = len(points)
    s = nn_scales(points)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    return GaussianSet(points, np.log(np.repeat(s[:, None], 3, axis=1)), quats,
                       np.full(n, float(logit(opacity))), sh, sh_degree)


def depth_reinitialize(gs: GaussianSet, views, cfg: DensifyConfig, seed=0, background=(0.0, 0.0, 0.0)):
    """Rebuild the set from the merged mid-point depth cloud of all ``views`` ((camera, image) pairs).

    Returns the previous set (with a warning) if no view has valid depth.
    """
    if cfg.reinit_points <= 0:
        raise ValueError("reinit_points must be positive")
    depth_views = []
    for cam, image in views:
        out = render(gs, cam)
        depth_views.append((cam, midpoint_depth_map(gs, cam, out), image))
    try:
        cloud = reproject_and_merge(depth_views, cfg.reinit_points, seed=seed)
    except NoValidDepthError:
        log.warning("depth reinitialization skipped: no valid depth in any view")
        return gs
    fresh = gaussians_from_points(cloud.points, cloud.colors, cfg.reinit_opacity, gs.sh_degree)
    if not cfg.reinit_replace:
        fresh = gs.concat(fresh)
        fresh.sh_degree = gs.sh_degree
    log.info("depth reinit: %d -> %d Gaussians", len(gs), len(fresh))
    return fresh


def reset_opacity(gs: GaussianSet, ceiling: float = 0.01) -> None:
    gs.opacity_logits = np.minimum(gs.opacity_logits, float(logit(ceiling)))
