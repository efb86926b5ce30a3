"""Command-line entry point: ``minisplat <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from .compress import CompressConfig, DecodeError, read_msc, write_msc
from .core import GaussianSet
from .depth import midpoint_depth_map
from .metrics import EvalReport
from .pipeline import VARIANTS, TrainConfig, run_pipeline
from .ply import read_gaussians, write_gaussians
from .raster import RenderOptions, render, render_index_visualization
from .scene import SYNTHETIC_KINDS, SceneError, generate_synthetic, load_scene, save_scene, write_depth_png, write_png
from .simplify import (baseline_sample, binarize, compute_importance, importance_sample_indices,
                       metric_for_scene, prune_indices)

log = logging.getLogger("minisplat")

TRAIN_FLAGS = {"scale": "scale", "seed": "seed", "keep_ratio": "keep_ratio", "theta_blur": "theta_blur",
               "grad_threshold": "grad_threshold", "reinit_points": "reinit_points",
               "total_iterations": "iterations", "importance_metric": "metric"}


def _load_model(path) -> GaussianSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model not found: {path}")
    if path.suffix == ".msc":
        return read_msc(path)
    return read_gaussians(path)


def cmd_synth(args):
    bundle = generate_synthetic(args.kind, args.seed, args.width, args.height, args.views)
    save_scene(bundle, args.out)
    print(f"wrote {args.kind} scene ({len(bundle.cameras)} views) to {args.out}")


def cmd_train(args, file_cfg):
    scene = load_scene(args.scene)
    base = {k: v for k, v in file_cfg.items() if k in {f.name for f in dataclasses.fields(TrainConfig)}}
    cfg = TrainConfig.from_dict(base)
    overrides = {field: getattr(args, dest) for field, dest in TRAIN_FLAGS.items()
                 if getattr(args, dest, None) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    result = run_pipeline(scene, args.variant, cfg, out_dir=args.out)
    print(f"{args.variant}: N={len(result.gaussians)} test PSNR={result.test_psnr:.3f} "
          f"SSIM={result.test_ssim:.4f} -> {args.out}")


def _views(scene, split):
    idx = {"train": scene.train_idx, "test": scene.test_idx,
           "all": list(range(len(scene.cameras)))}[split]
    return [(scene.cameras[i], scene.images[i]) for i in idx]


def cmd_render(args):
    gs = _load_model(args.model)
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam, _ in _views(scene, args.split):
        res = render(gs, cam, RenderOptions(background=scene.background))
        stem = Path(cam.name).stem
        write_png(out / f"{stem}.png", np.clip(res.color, 0, 1))
        if args.depth:
            write_depth_png(out / f"{stem}_depth.png", midpoint_depth_map(gs, cam, res))
        if args.index_vis:
            write_png(out / f"{stem}_index.png", render_index_visualization(res, args.seed))
    print(f"rendered {args.split} views to {out}")


def cmd_simplify(args):
    gs = _load_model(args.model)
    scene = load_scene(args.scene)
    cams = [c for c, _ in scene.train_views()]
    n0 = len(gs)
    if args.binarize:
        gs = binarize(gs, cams).apply(gs)
    if args.method in ("sample", "prune"):
        table = compute_importance(gs, cams, args.metric or metric_for_scene(scene.tag))
        if args.importance_csv:
            table.write_csv(args.importance_csv)
        idx = (importance_sample_indices(table.values, args.keep_ratio, args.seed) if args.method == "sample"
               else prune_indices(table.values, args.keep_ratio))
        gs = gs.take(idx)
    elif args.method != "none":
        gs = baseline_sample(gs, args.method, args.keep_ratio, args.cell_size, seed=args.seed)
    write_gaussians(args.out, gs)
    print(f"{args.method}: {n0} -> {len(gs)} Gaussians -> {args.out}")


def cmd_compress(args):
    gs = _load_model(args.model)
    cfg = CompressConfig(depth=args.depth, step=args.step, quantize=not args.no_quantize,
                         raw_attrs=args.raw_attrs)
    size = write_msc(args.out, gs, cfg)
    raw = Path(args.model).stat().st_size
    print(f"compressed {len(gs)} Gaussians: {size} bytes ({100.0 * size / raw:.1f}% of input)")


def cmd_decompress(args):
    gs = read_msc(args.input)
    write_gaussians(args.out, gs)
    print(f"decompressed {len(gs)} Gaussians -> {args.out}")


def cmd_eval(args):
    run = Path(args.run)
    model = Path(args.model) if args.model else run / "point_cloud.ply"
    if not model.exists():
        raise FileNotFoundError(f"no trained model at {model}; run 'train' first")
    tracemalloc.start()
    t0 = time.perf_counter()
    gs = _load_model(model)
    t1 = time.perf_counter()
    scene = load_scene(args.scene)
    report = EvalReport(num_gaussians=len(gs))
    t2 = time.perf_counter()
    for cam, image in _views(scene, args.split):
        res = render(gs, cam, RenderOptions(background=scene.background))
        report.add(Path(cam.name).stem, np.clip(res.color, 0, 1), image)
    t3 = time.perf_counter()
    report.stage_ms = {"load_model": (t1 - t0) * 1e3, "load_scene": (t2 - t1) * 1e3, "render_eval": (t3 - t2) * 1e3}
    report.peak_memory_bytes = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "eval.json")
    report.write_csv(out / "eval.csv")
    print(f"PSNR {report.mean_psnr:.3f} SSIM {report.mean_ssim:.4f} N {len(gs)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minisplat", description="Mini-Splatting on a CPU tile rasterizer.")
    p.add_argument("--config", help="JSON file of flag defaults (and TrainConfig fields for train); "
                                    "explicit flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--kind", choices=SYNTHETIC_KINDS, default="textured-plane")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--out", required=True, help="output scene directory")

    s = sub.add_parser("train", help="train a scene with the mini or mini-d schedule")
    s.add_argument("--scene", required=True, help="scene directory (cameras.json, images/, points.ply)")
    s.add_argument("--variant", choices=VARIANTS, default="mini")
    s.add_argument("--scale", type=float, help="iteration scale factor (1.0 = 30000 iterations)")
    s.add_argument("--iterations", type=int, help="full-scale total iterations before scaling")
    s.add_argument("--seed", type=int)
    s.add_argument("--keep-ratio", type=float, help="importance sampling keep ratio")
    s.add_argument("--theta-blur", type=float, help="blur split area fraction")
    s.add_argument("--grad-threshold", type=float, help="clone/split view-space gradient threshold")
    s.add_argument("--reinit-points", type=int, help="points drawn for depth reinitialization")
    s.add_argument("--metric", choices=("i1", "i2"), help="importance metric (default from scene tag)")
    s.add_argument("--out", required=True, help="run directory")

    s = sub.add_parser("render", help="render a model into PNGs")
    s.add_argument("--model", required=True, help=".ply or .msc model")
    s.add_argument("--scene", required=True)
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--depth", action="store_true", help="also write 16-bit mid-point depth PNGs")
    s.add_argument("--index-vis", action="store_true", help="also write max-contribution index maps")
    s.add_argument("--seed", type=int, default=0, help="palette seed for index maps")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("simplify", help="binarize, sample, prune or apply a baseline")
    s.add_argument("--model", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--method", choices=("sample", "prune", "random", "grid", "density", "none"), default="sample")
    s.add_argument("--binarize", action="store_true", help="binarize before the method")
    s.add_argument("--keep-ratio", type=float, default=0.5)
    s.add_argument("--cell-size", type=float, help="voxel size for grid sampling")
    s.add_argument("--metric", choices=("i1", "i2"))
    s.add_argument("--importance-csv", help="write the importance table here")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output .ply")

    s = sub.add_parser("compress", help="encode a model into an .msc archive")
    s.add_argument("--model", required=True)
    s.add_argument("--depth", type=int, default=16, help="octree depth")
    s.add_argument("--step", type=float, default=0.02, help="quantization step")
    s.add_argument("--no-quantize", action="store_true", help="store float64 coefficients")
    s.add_argument("--raw-attrs", action="store_true", help="store opacity and rotation untransformed")
    s.add_argument("--out", required=True, help="output .msc")

    s = sub.add_parser("decompress", help="decode an .msc archive into a .ply")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="PSNR/SSIM report for a trained run")
    s.add_argument("--run", required=True, help="run directory from train")
    s.add_argument("--scene", required=True)
    s.add_argument("--model", help="model path (default RUN/point_cloud.ply)")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--out", help="report directory (default RUN)")
    return p


COMMANDS = {"synth": cmd_synth, "render": cmd_render, "simplify": cmd_simplify,
            "compress": cmd_compress, "decompress": cmd_decompress, "eval": cmd_eval}


def _apply_config(parser, argv, path):
    """Reparse with config-file values as defaults so explicit flags win."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        parser.error(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        parser.error(f"config file is not valid JSON: {e}")
    if not isinstance(data, dict):
        parser.error("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices
    for sp in sub.values():
        known = {a.dest for a in sp._actions}
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in data.items() if k.replace("-", "_") in known})
    return parser.parse_args(argv), data


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        file_cfg = {}
        if args.config:
            args, file_cfg = _apply_config(parser, argv, args.config)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cmd_train(args, file_cfg)
        else:
            COMMANDS[args.command](args)
    except (SceneError, DecodeError, FileNotFoundError, ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
