"""Binary little-endian PLY in the de-facto 3DGS attribute layout, plus colored point clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .core import NUM_SH_COEFFS, GaussianSet

_REST = NUM_SH_COEFFS - 1


def _gaussian_fields():
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * _REST)]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    return names


def write_gaussians(path, gs: GaussianSet) -> None:
    names = _gaussian_fields()
    n = len(gs)
    # f_rest is stored channel-major: index = channel * 15 + coefficient
    rest = np.transpose(gs.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    cols = np.concatenate([
        gs.means, np.zeros((n, 3)), gs.sh[:, 0, :], rest,
        gs.opacity_logits[:, None], gs.log_scales, gs.quats,
    ], axis=1).astype("<f4")
    arr = np.empty(n, dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        arr[name] = cols[:, i]
    el = PlyElement.describe(arr, "vertex")
    PlyData([el], text=False, byte_order="<",
            comments=[f"sh_degree {gs.sh_degree}"]).write(str(path))


def read_gaussians(path) -> GaussianSet:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    n = len(v)
    means = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    names = v.dtype.names
    rest_names = sorted((k for k in names if k.startswith("f_rest_")), key=lambda k: int(k[7:]))
    sh = np.zeros((n, NUM_SH_COEFFS, 3))
    sh[:, 0, :] = np.stack([v[f"f_dc_{i}"] for i in range(3)], 1)
    if rest_names:
        k = len(rest_names) // 3
        rest = np.stack([v[name] for name in rest_names], 1).reshape(n, 3, k)
        sh[:, 1:1 + k, :] = np.transpose(rest, (0, 2, 1))
    quats = np.stack([v[f"rot_{i}"] for i in range(4)], 1).astype(np.float64)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    degree = 0
    for c in ply.comments:
        if c.startswith("sh_degree"):
            degree = int(c.split()[1])
    return GaussianSet(means, np.stack([v[f"scale_{i}"] for i in range(3)], 1),
                       quats, np.asarray(v["opacity"]), sh, degree)


def write_points(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Colored point cloud; ``colors`` in [0, 1] stored as uchar."""
    points = np.asarray(points, dtype=np.float64)
    rgb = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
    arr = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr["x"], arr["y"], arr["z"] = points.T
    arr["red"], arr["green"], arr["blue"] = rgb.T
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<").write(str(path))


def read_points(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point file not found: {path}")
    v = PlyData.read(str(path))["vertex"].data
    pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    if "red" in v.dtype.names:
        cols = np.stack([v["red"], v["green"], v["blue"]], 1).astype(np.float64) / 255.0
    else:
        cols = np.full_like(pts, 0.5)
    return pts, cols
