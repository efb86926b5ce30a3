"""Simplification: binarization, importance metrics, importance-weighted sampling, baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianSet
from .metrics import chamfer_distance  # noqa: F401  (re-exported)
from .raster import RenderOptions, render

log = logging.getLogger(__name__)


@dataclass
class ImportanceTable:
    values: np.ndarray
    metric: str = "i1"
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    @property
    def probabilities(self) -> np.ndarray:
        total = self.values.sum()
        if total <= 0:
            return np.zeros_like(self.values)
        return self.values / total

    def write_csv(self, path):
        p = self.probabilities
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", f"importance_{self.metric}", "probability"])
            for i, (v, pi) in enumerate(zip(self.values, p)):
                w.writerow([i, repr(float(v)), repr(float(pi))])


@dataclass
class BinarizationResult:
    survivors: np.ndarray          # sorted indices into the input set
    per_view: list                 # index set rendered as argmax in each view

    def apply(self, gs: GaussianSet) -> GaussianSet:
        return gs.take(self.survivors)


def binarize(gs: GaussianSet, cams) -> BinarizationResult:
    """Keep only Gaussians that are the max-weight contributor of some pixel in some view."""
    cams = list(cams)
    if not cams:
        raise ValueError("binarize needs at least one view")
    per_view = []
    for cam in cams:
        out = render(gs, cam)
        per_view.append(np.unique(out.i_max[out.i_max >= 0]))
    survivors = np.unique(np.concatenate(per_view)) if per_view else np.zeros(0, np.int64)
    return BinarizationResult(survivors.astype(np.int64), per_view)


def importance_i1(gs: GaussianSet, cams) -> ImportanceTable:
    """Accumulated blending weight of each Gaussian over every pixel of every view."""
    total = np.zeros(len(gs))
    for cam in cams:
        total += render(gs, cam).weight_sum
    return ImportanceTable(total, "i1")


def importance_i2(gs: GaussianSet, cams) -> ImportanceTable:
    """Per view, weight sum over projected area, counted only for that view's argmax Gaussians."""
    total = np.zeros(len(gs))
    zero_area = 0
    for cam in cams:
        out = render(gs, cam, RenderOptions(with_area=True))
        in_imax = out.max_contrib > 0
        has_area = out.area > 0
        zero_area += int(np.sum(~has_area & (out.weight_sum > 0)))
        per_view = np.where(has_area, out.weight_sum / np.maximum(out.area, 1), 0.0)
        total += np.where(in_imax, per_view, 0.0)
    return ImportanceTable(total, "i2", {"zero_area_with_weight": zero_area})


def compute_importance(gs: GaussianSet, cams, metric: str = "i1") -> ImportanceTable:
    if metric == "i1":
        return importance_i1(gs, cams)
    if metric == "i2":
        return importance_i2(gs, cams)
    raise ValueError(f"unknown importance metric {metric!r}")


def metric_for_scene(tag: str) -> str:
    """I1 for indoor scenes, I2 for outdoor scenes."""
    return "i2" if tag == "outdoor" else "i1"


def _keep_count(n, keep_ratio):
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1]")
    return int(np.floor(keep_ratio * n))


def importance_sample_indices(importance, keep_ratio: float, seed=0) -> np.ndarray:
    """Weighted sampling without replacement, probability proportional to importance.

    Uses exponential keys log(u) / I_i and keeps the largest; this draws the
    same distribution as sequential proportional sampling without replacement.
    """
    importance = np.asarray(importance, dtype=np.float64)
    n = len(importance)
    k = _keep_count(n, keep_ratio)
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    positive = importance > 0
    if positive.sum() < k:
        log.warning("only %d Gaussians have nonzero importance (%d requested); keeping those",
                    int(positive.sum()), k)
        return np.nonzero(positive)[0]
    keys = np.full(n, -np.inf)
    keys[positive] = np.log(u[positive]) / importance[positive]
    order = np.lexsort((np.arange(n), -keys))
    return np.sort(order[:k])


def sample_by_importance(gs: GaussianSet, table: ImportanceTable, keep_ratio: float, seed=0) -> GaussianSet:
    return gs.take(importance_sample_indices(table.values, keep_ratio, seed))


def prune_indices(importance, keep_ratio: float) -> np.ndarray:
    """Top ``floor(keep_ratio * N)`` by importance, ties broken by lower index."""
    importance = np.asarray(importance, dtype=np.float64)
    n = len(importance)
    k = _keep_count(n, keep_ratio)
    order = np.lexsort((np.arange(n), -importance))
    return np.sort(order[:k])


def prune_by_importance(gs: GaussianSet, table: ImportanceTable, keep_ratio: float) -> GaussianSet:
    return gs.take(prune_indices(table.values, keep_ratio))


def random_sample_indices(n: int, keep_ratio: float, seed=0) -> np.ndarray:
    k = _keep_count(n, keep_ratio)
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def grid_sample_indices(points, cell_size: float, importance=None) -> np.ndarray:
    """One survivor per occupied voxel: the highest-importance member (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    imp = np.zeros(n) if importance is None else np.asarray(importance, dtype=np.float64)
    cells = np.floor((points - points.min(axis=0)) / cell_size).astype(np.int64)
    order = np.lexsort((np.arange(n), -imp, cells[:, 2], cells[:, 1], cells[:, 0]))
    c = cells[order]
    first = np.ones(n, dtype=bool)
    first[1:] = np.any(c[1:] != c[:-1], axis=1)
    return np.sort(order[first])


def density_preserved_indices(points, keep_ratio: float, seed=0, k: int = 16) -> np.ndarray:
    """Sample without replacement with probability proportional to a k-NN density estimate."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.arange(n)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    radius = np.maximum(d[:, -1], 1e-12)
    density = kk / (4.0 / 3.0 * np.pi * radius ** 3)
    return importance_sample_indices(density, keep_ratio, seed)


def baseline_sample(gs: GaussianSet, method: str, keep_ratio: float = 1.0, cell_size: float = None,
                    importance=None, seed=0) -> GaussianSet:
    if method == "random":
        idx = random_sample_indices(len(gs), keep_ratio, seed)
    elif method == "grid":
        if cell_size is None:
            raise ValueError("grid sampling needs cell_size")
        idx = grid_sample_indices(gs.means, cell_size, importance)
    elif method == "density":
        idx = density_preserved_indices(gs.means, keep_ratio, seed)
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return gs.take(idx)
