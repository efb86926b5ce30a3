"""Scene bundles: on-disk format, loading, and deterministic synthetic scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, GaussianSet
from .ply import read_gaussians, read_points, write_gaussians, write_points
from .reference import render_reference

HOLDOUT_EVERY = 8
SYNTHETIC_KINDS = ("textured-plane", "cornell-boxlike", "cluster-field")


class SceneError(RuntimeError):
    pass


@dataclass
class SceneBundle:
    cameras: list
    images: list
    points: np.ndarray
    point_colors: np.ndarray
    tag: str = "indoor"
    name: str = ""
    depths: list | None = None
    gt_gaussians: GaussianSet | None = None
    background: tuple = (0.0, 0.0, 0.0)
    train_idx: list = field(default_factory=list)
    test_idx: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train_idx and not self.test_idx:
            self.train_idx, self.test_idx = holdout_split(len(self.cameras))
        if not self.train_idx:
            raise SceneError("scene has no training views")
        if set(self.train_idx) & set(self.test_idx):
            raise SceneError("train and test views overlap")

    def train_views(self):
        return [(self.cameras[i], self.images[i]) for i in self.train_idx]

    def test_views(self):
        return [(self.cameras[i], self.images[i]) for i in self.test_idx]

    @property
    def extent(self) -> float:
        """Radius of the camera-center cloud (times 1.1), as used for 3DGS thresholds."""
        centers = np.stack([c.center for c in self.cameras])
        return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max()) or 1.0


def holdout_split(n: int, every: int = HOLDOUT_EVERY):
    """Every ``every``-th view (index 0, every, 2*every, ...) is held out for testing."""
    if n == 1:
        return [0], []
    test = [i for i in range(n) if i % every == 0]
    train = [i for i in range(n) if i % every != 0]
    return train, test


def _read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img


def write_png(path, image) -> None:
    """Write a float image in [0, 1] (clipped) or a uint8 image as an 8-bit PNG."""
    if np.asarray(image).dtype == np.uint8:
        Image.fromarray(np.asarray(image)).save(path, optimize=False)
        return
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, optimize=False)


def write_depth_png(path, depth, max_depth=None) -> float:
    """16-bit PNG with depth scaled so ``max_depth`` maps to 65535; returns the scale used."""
    depth = np.asarray(depth, dtype=np.float64)
    max_depth = float(depth.max()) if max_depth is None else float(max_depth)
    scale = 65535.0 / max_depth if max_depth > 0 else 1.0
    q = np.clip(np.round(depth * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    return scale


def camera_to_json(cam: Camera, image_name: str) -> dict:
    return {
        "image": image_name,
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.R.reshape(-1).tolist(),
        "translation": cam.t.tolist(),
    }


def _camera_from_json(d: dict, where: str) -> Camera:
    try:
        return Camera(d["width"], d["height"], float(d["fx"]), float(d["fy"]),
                      float(d["cx"]), float(d["cy"]), np.asarray(d["rotation"], dtype=np.float64),
                      np.asarray(d["translation"], dtype=np.float64), d.get("image", ""))
    except KeyError as e:
        raise SceneError(f"{where}: camera entry missing field {e}") from None
    except ValueError as e:
        raise SceneError(f"{where}: malformed camera: {e}") from None


def load_scene(path) -> SceneBundle:
    """Load ``cameras.json``, ``images/`` and ``points.ply`` from a scene directory."""
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise SceneError(f"missing {cam_file}")
    if not (root / "points.ply").exists():
        raise SceneError(f"missing {root / 'points.ply'}")
    try:
        meta = json.loads(cam_file.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"{cam_file}: invalid JSON ({e})") from None
    views = meta.get("views")
    if not isinstance(views, list) or not views:
        raise SceneError(f"{cam_file}: 'views' must be a nonempty list")
    views = sorted(views, key=lambda v: str(v.get("image", "")))
    cameras, images, depths = [], [], []
    for k, v in enumerate(views):
        cam = _camera_from_json(v, f"{cam_file} view {k}")
        img_path = root / "images" / cam.name
        if not img_path.exists():
            raise SceneError(f"missing image {img_path}")
        img = _read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} does not match camera")
        cameras.append(cam)
        images.append(img)
        dpath = root / "depth" / (Path(cam.name).stem + ".npy")
        depths.append(np.load(dpath) if dpath.exists() else None)
    pts, cols = read_points(root / "points.ply")
    gt = root / "gt_gaussians.ply"
    return SceneBundle(
        cameras, images, pts, cols,
        tag=meta.get("scene_tag", "indoor"), name=meta.get("name", root.name),
        depths=depths if all(d is not None for d in depths) else None,
        gt_gaussians=read_gaussians(gt) if gt.exists() else None,
        background=tuple(meta.get("background", (0.0, 0.0, 0.0))),
    )


def save_scene(bundle: SceneBundle, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for k, (cam, img) in enumerate(zip(bundle.cameras, bundle.images)):
        name = cam.name or f"{k:03d}.png"
        write_png(root / "images" / name, img)
        views.append(camera_to_json(cam, name))
        if bundle.depths is not None:
            (root / "depth").mkdir(exist_ok=True)
            np.save(root / "depth" / (Path(name).stem + ".npy"), bundle.depths[k])
    meta = {"name": bundle.name, "scene_tag": bundle.tag,
            "background": list(bundle.background), "views": views}
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    write_points(root / "points.ply", bundle.points, bundle.point_colors)
    if bundle.gt_gaussians is not None:
        write_gaussians(root / "gt_gaussians.ply", bundle.gt_gaussians)


# synthetic scenes ---------------------------------------------------------------


@dataclass
class _Quad:
    """Axis-aligned rectangle: ``axis`` is the constant coordinate at ``value``."""

    axis: int
    value: float
    lo: tuple
    hi: tuple
    color_fn: object

    def sample(self, spacing):
        u_axes = [a for a in range(3) if a != self.axis]
        nu = max(2, int(round((self.hi[0] - self.lo[0]) / spacing)))
        nv = max(2, int(round((self.hi[1] - self.lo[1]) / spacing)))
        su = (self.hi[0] - self.lo[0]) / nu
        sv = (self.hi[1] - self.lo[1]) / nv
        uu, vv = np.meshgrid(self.lo[0] + (np.arange(nu) + 0.5) * su,
                             self.lo[1] + (np.arange(nv) + 0.5) * sv, indexing="ij")
        pts = np.zeros((uu.size, 3))
        pts[:, self.axis] = self.value
        pts[:, u_axes[0]] = uu.ravel()
        pts[:, u_axes[1]] = vv.ravel()
        scales = np.zeros((len(pts), 3))
        scales[:, self.axis] = 0.1 * min(su, sv)
        scales[:, u_axes[0]] = 0.6 * su
        scales[:, u_axes[1]] = 0.6 * sv
        return pts, scales, self.color_fn(pts)

    def intersect(self, origin, dirs):
        """Ray parameter per ray (inf where missed); dirs (..., 3)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.value - origin[self.axis]) / dirs[..., self.axis]
        p = origin + t[..., None] * dirs
        u_axes = [a for a in range(3) if a != self.axis]
        inside = ((p[..., u_axes[0]] >= self.lo[0]) & (p[..., u_axes[0]] <= self.hi[0])
                  & (p[..., u_axes[1]] >= self.lo[1]) & (p[..., u_axes[1]] <= self.hi[1]))
        return np.where(inside & (t > 1e-9) & np.isfinite(t), t, np.inf)


def _quads_to_gaussians(quads, spacing, opacity=0.95):
    pts, scales, cols = zip(*(q.sample(spacing) for q in quads))
    pts, scales, cols = np.concatenate(pts), np.concatenate(scales), np.concatenate(cols)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(pts), 1))
    return GaussianSet.from_activated(pts, scales, quats, np.full(len(pts), opacity), colors=cols)


def _analytic_depth(quads, cam: Camera):
    origin, dirs = cam.pixel_rays()
    t = np.full(dirs.shape[:2], np.inf)
    for q in quads:
        t = np.minimum(t, q.intersect(origin, dirs))
    # pixel_rays directions have unit camera-z, so t is camera depth
    return np.where(np.isfinite(t), t, 0.0)


def _orbit_cameras(n, radius, target, elev_range, width, height, fov, rng, up=(0, 0, 1),
                   azim_range=(0.0, 360.0)):
    cams = []
    for k in range(n):
        az = np.deg2rad(azim_range[0] + (azim_range[1] - azim_range[0]) * (k + 0.5) / n
                        + rng.uniform(-5, 5))
        el = np.deg2rad(rng.uniform(*elev_range))
        r = radius * rng.uniform(0.95, 1.05)
        eye = np.asarray(target) + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        if up == (0, 0, 1):
            pass
        else:
            eye = np.asarray(target) + r * np.array([np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, up, width, height, fov, name=f"{k:03d}.png"))
    return cams


def _texture(p):
    x, y = p[:, 0], p[:, 1]
    r = 0.5 + 0.35 * np.sin(3.0 * np.pi * x) * np.cos(2.0 * np.pi * y)
    g = 0.5 + 0.35 * np.cos(2.5 * np.pi * (x + y))
    checker = (np.floor(2 * x + 2) + np.floor(2 * y + 2)) % 2
    b = 0.25 + 0.5 * checker
    return np.clip(np.stack([r, g, b], 1), 0, 1)


def _textured_plane(rng, width, height, n_views):
    quads = [_Quad(2, 0.0, (-1.0, -1.0), (1.0, 1.0), _texture)]
    gt = _quads_to_gaussians(quads, spacing=2.0 / 48)
    cams = _orbit_cameras(n_views, 2.8, (0, 0, 0), (40, 75), width, height, 55, rng)
    return quads, gt, cams


def _cornell(rng, width, height, n_views):
    def solid(rgb, shade=0.15):
        rgb = np.asarray(rgb, dtype=np.float64)
        return lambda p: np.clip(rgb[None, :] * (1 - shade * (p[:, 2:3] + 1) / 2), 0, 1)

    def stripes(p):
        base = np.array([0.85, 0.85, 0.8])
        s = 0.15 * np.sin(4 * np.pi * p[:, 0:1])
        return np.clip(base[None, :] + s, 0, 1)

    quads = [
        _Quad(2, -1.0, (-1, -1), (1, 1), stripes),                       # floor
        _Quad(2, 1.0, (-1, -1), (1, 1), solid([0.9, 0.9, 0.9])),          # ceiling
        _Quad(1, 1.0, (-1, -1), (1, 1), solid([0.8, 0.8, 0.75])),         # back wall
        _Quad(0, -1.0, (-1, -1), (1, 1), solid([0.8, 0.15, 0.1])),        # left wall
        _Quad(0, 1.0, (-1, -1), (1, 1), solid([0.15, 0.7, 0.2])),         # right wall
        # short block
        _Quad(2, -0.4, (-0.7, -0.3), (-0.1, 0.3), solid([0.9, 0.8, 0.3])),
        _Quad(1, -0.3, (-0.7, -1.0), (-0.1, -0.4), solid([0.85, 0.75, 0.3])),
        _Quad(0, -0.1, (-0.3, -1.0), (0.3, -0.4), solid([0.7, 0.6, 0.25])),
        # tall block
        _Quad(2, 0.2, (0.15, 0.2), (0.65, 0.7), solid([0.3, 0.4, 0.9])),
        _Quad(1, 0.2, (0.15, -1.0), (0.65, 0.2), solid([0.25, 0.35, 0.8])),
        _Quad(0, 0.15, (0.2, -1.0), (0.7, 0.2), solid([0.2, 0.3, 0.7])),
    ]
    gt = _quads_to_gaussians(quads, spacing=2.0 / 28)
    # a fan of viewpoints in front of the open side, wide enough for a sensible camera extent
    cams = []
    for k in range(n_views):
        az = np.deg2rad(-28 + 56 * (k + 0.5) / n_views + rng.uniform(-2, 2))
        el = np.deg2rad(rng.uniform(-12, 15))
        r = rng.uniform(2.7, 3.1)
        eye = r * np.array([np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)])
        target = np.array([0.0, 0.0, -0.1]) + rng.uniform(-0.1, 0.1, 3)
        cams.append(Camera.look_at(eye, target, (0, 0, 1), width, height, 60, name=f"{k:03d}.png"))
    return quads, gt, cams


def _cluster_field(rng, width, height, n_views):
    quads = [_Quad(2, 0.0, (-1.0, -1.0), (1.0, 1.0), _texture)]
    gt = _quads_to_gaussians(quads, spacing=2.0 / 40)
    centers = rng.uniform(-0.8, 0.8, (6, 2))
    d = np.min(np.linalg.norm(gt.means[:, None, :2] - centers[None], axis=2), axis=1)
    clustered = d < 0.3
    # clustered Gaussians are opaque and large, the rest faint: a two-population importance
    opac = np.where(clustered, 0.95, 0.12)
    gt.opacity_logits = np.log(opac) - np.log1p(-opac)
    gt.log_scales[clustered] += np.log(1.3)
    cams = _orbit_cameras(n_views, 2.8, (0, 0, 0), (45, 80), width, height, 55, rng)
    return quads, gt, cams


def generate_synthetic(kind: str = "textured-plane", seed: int = 0, width: int = 64, height: int = 64,
                       n_views: int = 16, n_points: int = 400) -> SceneBundle:
    """Analytic scene rendered by the brute-force reference renderer.

    Targets are quantized to 8 bits so a saved and reloaded bundle is identical.
    """
    rng = np.random.default_rng(seed)
    if kind == "textured-plane":
        quads, gt, cams = _textured_plane(rng, width, height, n_views)
    elif kind == "cornell-boxlike":
        quads, gt, cams = _cornell(rng, width, height, n_views)
    elif kind == "cluster-field":
        quads, gt, cams = _cluster_field(rng, width, height, n_views)
    else:
        raise ValueError(f"unknown synthetic scene {kind!r}; choose from {SYNTHETIC_KINDS}")
    images = [np.round(np.clip(render_reference(gt, c).color, 0, 1) * 255) / 255 for c in cams]
    depths = [_analytic_depth(quads, c) for c in cams]
    pick = np.sort(rng.choice(len(gt), size=min(n_points, len(gt)), replace=False))
    extent = np.ptp(gt.means, axis=0).max()
    pts = gt.means[pick] + rng.normal(scale=0.01 * extent, size=(len(pick), 3))
    cols = np.round(np.clip(gt.colors()[pick], 0, 1) * 255) / 255
    return SceneBundle(cams, images, pts, cols, tag="indoor", name=kind, depths=depths,
                       gt_gaussians=gt)
