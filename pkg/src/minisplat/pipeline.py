"""Training schedule: densification (blur split, depth reinit) then simplification (binarize, sample, prune)."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import MAX_SH_DEGREE, GaussianSet
from .densify import (DensifyConfig, DensifyStats, adaptive_control_step, depth_reinitialize,
                      gaussians_from_points, nn_scales, reset_opacity, select_blur_gaussians)
from .metrics import psnr, ssim
from .ply import write_gaussians
from .raster import RenderOptions, render
from .simplify import binarize, compute_importance, importance_sample_indices, metric_for_scene, prune_indices
from .train import Adam, LearningRates, backward

log = logging.getLogger(__name__)

VARIANTS = ("mini", "mini-d")
LOG_COLUMNS = ("iter", "loss", "psnr", "ssim", "num_gaussians")


def scaled(value: int, scale: float) -> int:
    """Iteration constant at desk scale: rounded, never below 1."""
    return max(1, int(round(value * scale)))


@dataclass
class TrainConfig:
    """Schedule constants are given at full scale and multiplied by ``scale``.

    The opacity reset interval is the exception unless ``scale_opacity_reset`` is set: recovery
    from a reset takes a fixed number of Adam steps, so shrinking the interval with the schedule
    leaves too few steps before simplification.  ``theta_blur`` and ``grad_threshold`` default
    to desk values suited to 64x64 images.
    """

    scale: float = 0.1
    total_iterations: int = 30000
    densify_until: int = 15000
    simplification1: int = 15000
    simplification2: int = 20000
    reinit_interval: int = 5000
    densify_interval: int = 100
    densify_from: int = 500
    opacity_reset_interval: int = 3000
    sh_interval: int = 1000
    log_interval: int = 2000
    lambda_dssim: float = 0.2
    lrs: LearningRates = field(default_factory=LearningRates)
    theta_blur: float = 4e-3
    grad_threshold: float = 1e-3
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    reinit_points: int = 8000
    keep_ratio: float = 0.8
    prune_few_ratio: float = 0.1
    importance_metric: str | None = None
    resample_scales: bool = False
    blur_split: bool = True
    depth_reinit: bool = True
    scale_opacity_reset: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if not self.simplification1 <= self.simplification2 <= self.total_iterations:
            raise ValueError("need simplification1 <= simplification2 <= total_iterations")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if not 0.0 <= self.prune_few_ratio < 1.0:
            raise ValueError("prune_few_ratio must lie in [0, 1)")

    def iters(self, name: str) -> int:
        return scaled(getattr(self, name), self.scale)

    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(
            theta_blur=self.theta_blur, densify_interval=self.iters("densify_interval"),
            densify_from=self.iters("densify_from"), densify_until=self.iters("densify_until"),
            grad_threshold=self.grad_threshold, percent_dense=self.percent_dense,
            min_opacity=self.min_opacity, opacity_reset_interval=(self.iters("opacity_reset_interval") if self.scale_opacity_reset
                                    else self.opacity_reset_interval),
            reinit_interval=self.iters("reinit_interval"), reinit_points=self.reinit_points)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("lrs"), dict):
            d["lrs"] = LearningRates(**d["lrs"])
        return cls(**d)


@dataclass
class PipelineResult:
    gaussians: GaussianSet
    log_rows: list
    losses: list
    events: list
    timings: list
    test_psnr: float
    test_ssim: float


def evaluate(gs: GaussianSet, views, background=(0.0, 0.0, 0.0)):
    """Mean PSNR and SSIM over (camera, image) pairs."""
    ps, ss = [], []
    for cam, image in views:
        out = render(gs, cam, RenderOptions(background=background))
        ps.append(psnr(out.color, image))
        ss.append(ssim(out.color, image))
    return float(np.mean(ps)), float(np.mean(ss))


def init_from_points(points, colors) -> GaussianSet:
    """3DGS initialization: isotropic, 3-NN sized, opacity 0.1, SH level 0."""
    return gaussians_from_points(points, colors, opacity=0.1, sh_degree=0)


class _ViewSampler:
    """Visits every training view once per epoch in a seeded random order."""

    def __init__(self, n, rng):
        self.n, self.rng, self.stack = n, rng, []

    def next(self) -> int:
        if not self.stack:
            self.stack = list(self.rng.permutation(self.n)[::-1])
        return int(self.stack.pop())


def _fmt(x: float) -> str:
    return repr(float(x))


def run_pipeline(scene, variant: str = "mini", cfg: TrainConfig | None = None, out_dir=None,
                 init: GaussianSet | None = None) -> PipelineResult:
    """Train ``scene`` (a SceneBundle) following the densify-then-simplify schedule.

    ``mini-d`` skips both simplification steps. With ``out_dir`` the metrics log
    (``metrics.csv``), timings (``timing.csv``), events and a final checkpoint are written.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = cfg or TrainConfig()
    dcfg = cfg.densify_config()
    total = cfg.iters("total_iterations")
    simp1 = cfg.iters("simplification1")
    simp2 = cfg.iters("simplification2")
    sh_interval = cfg.iters("sh_interval")
    log_interval = cfg.iters("log_interval")
    metric = cfg.importance_metric or metric_for_scene(scene.tag)
    bg = scene.background
    rng = np.random.default_rng(cfg.seed)
    train_views = scene.train_views()
    eval_views = scene.test_views() or train_views
    train_cams = [c for c, _ in train_views]
    extent = scene.extent

    gs = init.copy() if init is not None else init_from_points(scene.points, scene.point_colors)
    adam = Adam(cfg.lrs, spatial_scale=extent, position_decay_steps=total)
    stats = DensifyStats.zeros(len(gs))
    sampler = _ViewSampler(len(train_views), rng)
    rows, losses, events, timings = [], [], [], []
    window = []
    t_start = time.perf_counter()

    def event(it, name, n_before):
        events.append({"iter": it, "event": name, "n_before": n_before, "n_after": len(gs),
                       "sh_degree": gs.sh_degree})
        log.info("iter %d: %s, N %d -> %d", it, name, n_before, len(gs))

    for it in range(1, total + 1):
        cam, target = train_views[sampler.next()]
        value, grads, out = backward(gs, cam, target, cfg.lambda_dssim, bg)
        losses.append(value)
        window.append(value)
        if it < dcfg.densify_until:
            stats.add(grads)
        adam.step(gs, grads, it)

        if it < dcfg.densify_until:
            if it >= dcfg.densify_from and it % dcfg.densify_interval == 0:
                n0 = len(gs)
                blur = select_blur_gaussians(out, cam, dcfg) if cfg.blur_split else None
                gs, source = adaptive_control_step(
                    gs, stats, dcfg, extent, seed=rng, extra_split=blur,
                    prune_large=it > dcfg.opacity_reset_interval, return_source=True)
                adam.remap(source)
                stats = DensifyStats.zeros(len(gs))
                event(it, "densify", n0)
            if cfg.depth_reinit and it % dcfg.reinit_interval == 0:
                n0 = len(gs)
                fresh = depth_reinitialize(gs, train_views, dcfg, seed=rng, background=bg)
                if fresh is not gs:
                    gs = fresh
                    adam = Adam(cfg.lrs, spatial_scale=extent, position_decay_steps=total)
                    stats = DensifyStats.zeros(len(gs))
                    event(it, "depth_reinit", n0)
            elif it % dcfg.opacity_reset_interval == 0:
                reset_opacity(gs)
                event(it, "opacity_reset", len(gs))
        else:
            if variant == "mini" and it == simp1:
                n0 = len(gs)
                gs = binarize(gs, train_cams).apply(gs)
                table = compute_importance(gs, train_cams, metric)
                keep = importance_sample_indices(table.values, cfg.keep_ratio, seed=rng)
                gs = gs.take(keep)
                if cfg.resample_scales:
                    gs.log_scales = np.repeat(np.log(nn_scales(gs.means))[:, None], 3, axis=1)
                adam = Adam(cfg.lrs, spatial_scale=extent, position_decay_steps=total)
                event(it, "binarize_sample", n0)
            if variant == "mini" and it == simp2:
                n0 = len(gs)
                gs = binarize(gs, train_cams).apply(gs)
                table = compute_importance(gs, train_cams, metric)
                keep = prune_indices(table.values, 1.0 - cfg.prune_few_ratio)
                adam.remap(keep)
                gs = gs.take(keep)
                event(it, "binarize_prune", n0)
        # view-dependent color only after the first simplification point
        if it >= simp1:
            level = min(MAX_SH_DEGREE, 1 + (it - simp1) // sh_interval)
            if level != gs.sh_degree:
                gs.sh_degree = level
                event(it, "sh_level", len(gs))

        if it % log_interval == 0 or it == total:
            p, s = evaluate(gs, eval_views, bg)
            rows.append({"iter": it, "loss": float(np.mean(window)), "psnr": p, "ssim": s,
                         "num_gaussians": len(gs)})
            timings.append({"iter": it, "wall_ms": (time.perf_counter() - t_start) * 1e3})
            window = []

    p, s = rows[-1]["psnr"], rows[-1]["ssim"]
    result = PipelineResult(gs, rows, losses, events, timings, p, s)
    if out_dir is not None:
        save_run(result, out_dir, cfg, variant, adam, total)
    return result


def fine_tune(gs: GaussianSet, scene, iterations: int, cfg: TrainConfig | None = None) -> GaussianSet:
    """Plain optimization of a copy of ``gs``: no densification, no simplification, SH level kept."""
    cfg = cfg or TrainConfig()
    gs = gs.copy()
    rng = np.random.default_rng(cfg.seed)
    views = scene.train_views()
    sampler = _ViewSampler(len(views), rng)
    adam = Adam(cfg.lrs, spatial_scale=scene.extent, position_decay_steps=iterations)
    for it in range(1, iterations + 1):
        cam, target = views[sampler.next()]
        _, grads, _ = backward(gs, cam, target, cfg.lambda_dssim, scene.background)
        adam.step(gs, grads, it)
    return gs


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["iter"], _fmt(r["loss"]), _fmt(r["psnr"]), _fmt(r["ssim"]), r["num_gaussians"]])


def save_run(result: PipelineResult, out_dir, cfg: TrainConfig, variant: str, adam: Adam, iteration: int):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.log_rows)
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "wall_ms"])
        for r in result.timings:
            w.writerow([r["iter"], f"{r['wall_ms']:.1f}"])
    (out / "events.json").write_text(json.dumps(result.events, indent=1))
    write_gaussians(out / "point_cloud.ply", result.gaussians)
    save_optimizer(out / "optimizer.json", adam, iteration)
    summary = {"variant": variant, "config": cfg.to_dict(), "iterations": iteration,
               "num_gaussians": len(result.gaussians), "test_psnr": result.test_psnr,
               "test_ssim": result.test_ssim, "sh_degree": result.gaussians.sh_degree}
    (out / "run.json").write_text(json.dumps(summary, indent=1))


def save_optimizer(path, adam: Adam, iteration: int) -> None:
    """Scalar state in JSON; the moment arrays go to a sibling ``.npz``."""
    path = Path(path)
    moments = path.with_suffix(".npz")
    arrays = {f"m_{k}": v for k, v in adam.m.items()}
    arrays.update({f"v_{k}": v for k, v in adam.v.items()})
    np.savez(moments, **arrays)
    state = {"iteration": iteration, "steps": adam.t, "betas": [adam.beta1, adam.beta2],
             "eps": adam.eps, "spatial_scale": adam.spatial_scale,
             "position_decay_steps": adam.position_decay_steps, "lrs": asdict(adam.lrs),
             "moments": moments.name}
    path.write_text(json.dumps(state, indent=1))


def load_optimizer(path) -> tuple[Adam, int]:
    path = Path(path)
    state = json.loads(path.read_text())
    adam = Adam(LearningRates(**state["lrs"]), state["spatial_scale"], state["position_decay_steps"],
                state["betas"][0], state["betas"][1], state["eps"])
    with np.load(path.parent / state["moments"]) as z:
        for key in z.files:
            kind, name = key.split("_", 1)
            (adam.m if kind == "m" else adam.v)[name] = z[key].copy()
    adam.t = {k: int(v) for k, v in state["steps"].items()}
    return adam, int(state["iteration"])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
