import itertools

import numpy as np
import pytest

from minisplat.compress import (CompressConfig, DecodeError, build_octree, compress_scene, decompress_scene,
                                dequantize, pack, quantize, raht_forward, raht_inverse, raht_plan, read_msc,
                                unpack, write_msc)
from minisplat.metrics import psnr
from minisplat.raster import render
from oracles import morton_by_bits, random_camera, random_gaussians


def test_single_point_octree():
    tree = build_octree(np.array([[0.3, -1.0, 2.0]]), depth=16)
    assert len(tree) == 1 and tree.order.tolist() == [0]
    plan = raht_plan(tree)
    assert raht_forward(plan, np.array([[2.5]]))[0, 0] == 2.5


def test_cube_corners_depth1():
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    rng = np.random.default_rng(0)
    perm = rng.permutation(8)
    tree = build_octree(corners[perm], depth=1)
    cells = tree.cells[tree.order]
    assert len({tuple(c) for c in cells.tolist()}) == 8
    assert tree.codes.tolist() == list(range(8))


def test_morton_order_matches_oracle(rng):
    for depth in (1, 4, 10, 16):
        pts = rng.uniform(-3, 3, (300, 3))
        tree = build_octree(pts, depth)
        codes = [morton_by_bits(c, depth) for c in tree.cells]
        expect = sorted(range(300), key=lambda i: (codes[i], i))
        assert tree.order.tolist() == expect


def test_raht_constant_signal_has_no_highpass():
    tree = build_octree(np.array([[0.0, 0, 0], [1.0, 0, 0]]), depth=1)
    c = raht_forward(raht_plan(tree), np.array([[0.7], [0.7]]))
    assert abs(c[1, 0]) < 1e-15
    assert np.isclose(c[0, 0], 0.7 * np.sqrt(2))


def test_raht_roundtrip_and_parseval(rng):
    for n in (2, 17, 500, 10000):
        pts = rng.uniform(0, 1, (n, 3))
        if n > 2:
            pts[: n // 10] = pts[n // 10: 2 * (n // 10)]  # duplicate cells
        tree = build_octree(pts, depth=int(rng.integers(2, 17)))
        plan = raht_plan(tree)
        a = rng.normal(size=(n, 3))
        c = raht_forward(plan, a)
        assert np.abs(raht_inverse(plan, c) - a).max() < 1e-9
        assert abs(np.sum(c ** 2) - np.sum(a ** 2)) < 1e-9 * max(1.0, np.sum(a ** 2))


def test_quantizer():
    assert quantize([0.01, -0.01, 0.0, 0.03], 0.02).tolist() == [1, -1, 0, 2]
    assert np.isclose(dequantize(quantize([0.01], 0.02), 0.02)[0], 0.02)
    c = np.random.default_rng(1).normal(size=100000)
    err = np.abs(dequantize(quantize(c, 0.02), 0.02) - c)
    assert err.max() <= 0.01 + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        CompressConfig(depth=0)
    with pytest.raises(ValueError):
        CompressConfig(depth=22)
    with pytest.raises(ValueError):
        CompressConfig(step=0)


def test_pack_unpack_bitwise(rng):
    gs = random_gaussians(rng, 200, sh_degree=3)
    scene = compress_scene(gs)
    back = unpack(pack(scene))
    assert back.n == scene.n and back.depth == 16 and back.step == 0.02
    assert np.array_equal(back.centers, scene.centers)
    for name, arr in scene.streams.items():
        assert np.array_equal(back.streams[name], arr)
    assert pack(scene) == pack(compress_scene(gs))


def test_empty_container():
    from minisplat.core import GaussianSet
    blob = pack(compress_scene(GaussianSet.empty()))
    assert len(decompress_scene(unpack(blob))) == 0


def test_corrupt_container(rng):
    blob = bytearray(pack(compress_scene(random_gaussians(rng, 20))))
    with pytest.raises(DecodeError):
        unpack(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(DecodeError):
        unpack(bytes(blob[:10]))
    bad = bytearray(blob)
    bad[-20] ^= 0xFF
    with pytest.raises(DecodeError):
        unpack(bytes(bad))
    # flip one CRC byte in the header
    from minisplat.compress import _HEADER
    crc_at = _HEADER.size - 4
    bad = bytearray(blob)
    bad[crc_at] ^= 0x01
    with pytest.raises(DecodeError):
        unpack(bytes(bad))


def test_lossless_path(rng):
    gs = random_gaussians(rng, 300, sh_degree=3)
    gs.means = gs.means.astype(np.float32).astype(np.float64)
    out = decompress_scene(compress_scene(gs, CompressConfig(quantize=False)))
    assert np.array_equal(out.means, gs.means)
    assert np.abs(out.log_scales - gs.log_scales).max() < 1e-9
    assert np.abs(out.opacity_logits - gs.opacity_logits).max() < 1e-9
    assert np.abs(out.sh - gs.sh).max() < 1e-9
    assert np.abs(out.unit_quats - gs.unit_quats).max() < 1e-9


def test_near_lossless_step(rng):
    gs = random_gaussians(rng, 100, sh_degree=2)
    out = decompress_scene(compress_scene(gs, CompressConfig(step=1e-9)))
    assert np.abs(out.log_scales - gs.log_scales).max() < 1e-6
    assert np.abs(out.sh - gs.sh).max() < 1e-6
    assert np.abs(out.opacities - gs.opacities).max() < 1e-6
    assert np.allclose(np.linalg.norm(out.quats, axis=1), 1.0)


def test_depth_extremes(rng):
    gs = random_gaussians(rng, 10)
    for depth in (1, 16):
        out = decompress_scene(compress_scene(gs, CompressConfig(depth=depth)))
        # each coefficient is off by at most step/2; orthonormality bounds the attribute error
        err = np.sqrt(np.sum((out.log_scales - gs.log_scales) ** 2, axis=0))
        assert np.all(err <= 0.01 * np.sqrt(len(gs)) + 1e-12)


def test_rate_distortion_monotone(rng):
    gs = random_gaussians(rng, 400, sh_degree=1, scale_range=(0.03, 0.15))
    cams = [random_camera(rng, 48, 48) for _ in range(3)]
    ref = [render(gs, c).color for c in cams]
    sizes, quality = [], []
    for step in (0.005, 0.02, 0.08):
        blob = pack(compress_scene(gs, CompressConfig(step=step)))
        out = decompress_scene(unpack(blob))
        sizes.append(len(blob))
        quality.append(np.mean([psnr(np.clip(render(out, c).color, 0, 1), np.clip(r, 0, 1))
                                for c, r in zip(cams, ref)]))
    assert sizes[0] > sizes[1] > sizes[2]
    assert quality[0] >= quality[1] >= quality[2]


def test_msc_file_roundtrip(tmp_path, rng):
    gs = random_gaussians(rng, 50, sh_degree=1)
    n = write_msc(tmp_path / "a.msc", gs)
    assert n == (tmp_path / "a.msc").stat().st_size
    out = read_msc(tmp_path / "a.msc")
    assert len(out) == 50 and out.sh_degree == 1
    assert np.array_equal(out.means, gs.means.astype(np.float32).astype(np.float64))
