import numpy as np

from minisplat.core import Camera, GaussianSet
from minisplat.raster import LOWPASS, RenderOptions, project, render, render_index_visualization
from minisplat.reference import render_reference
from oracles import random_camera, random_gaussians


def axis_camera(size=32, f=40.0):
    return Camera(size, size, f, f, size / 2, size / 2)


def single(mean, scale, opacity, color):
    return GaussianSet.from_activated(np.atleast_2d(mean), np.full((1, 3), scale), [[1, 0, 0, 0]],
                                      [opacity], colors=np.atleast_2d(color))


def test_isotropic_projection():
    cam = axis_camera()
    sigma, z = 0.1, 5.0
    gs = single([0, 0, z], sigma, 0.5, [1, 1, 1])
    p = project(gs, cam)
    expect = (cam.fx * sigma / z) ** 2 + LOWPASS
    assert np.allclose(p.cov2d[0], [expect, 0.0, expect], atol=1e-6)
    assert p.radii[0] >= 1


def test_behind_camera_culled():
    cam = axis_camera()
    gs = single([0, 0, -2.0], 0.3, 0.9, [1, 0, 0])
    assert not project(gs, cam).valid[0]
    out = render(gs, cam)
    assert np.all(out.i_max == -1) and np.allclose(out.color, 0)


def test_projection_matches_numeric_jacobian(rng):
    for _ in range(20):
        cam = random_camera(rng)
        gs = random_gaussians(rng, 1, spread=0.5)
        p = project(gs, cam)
        h = 1e-6
        J = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, k] = (cam.project(gs.means[0] + e) - cam.project(gs.means[0] - e)) / (2 * h)
        cov = J @ gs.covariances()[0] @ J.T
        a, b, c = p.cov2d[0]
        got = np.array([[a - LOWPASS, b], [b, c - LOWPASS]])
        assert np.allclose(got, cov, rtol=1e-4, atol=1e-8)


def test_single_gaussian_pixel_color():
    cam = axis_camera(33)
    # pixel (16, 16) has its center exactly on the optical axis
    gs = single([0, 0, 4.0], 0.2, 0.99, [0.2, 0.6, 0.8])
    out = render(gs, cam)
    assert np.allclose(out.color[16, 16], 0.99 * np.array([0.2, 0.6, 0.8]), atol=1e-6)
    assert out.i_max[16, 16] == 0


def test_two_gaussian_transmittance():
    cam = axis_camera(33)
    a1, a2 = 0.6, 0.7
    gs = GaussianSet.from_activated([[0, 0, 3.0], [0, 0, 4.0]], np.full((2, 3), 0.3), [[1, 0, 0, 0]] * 2,
                                    [a1, a2], colors=[[1, 0, 0], [0, 1, 0]])
    out = render(gs, cam)
    px = out.color[16, 16]
    # centered footprints: G = 1 at the central pixel
    assert np.isclose(px[0], a1, atol=1e-6)
    assert np.isclose(px[1], (1 - a1) * a2, atol=1e-6)
    assert out.i_max[16, 16] == 1 if (1 - a1) * a2 > a1 else out.i_max[16, 16] == 0


def test_empty_scene_is_background():
    cam = axis_camera(20)
    out = render(GaussianSet.empty(), cam, RenderOptions(background=(0.1, 0.2, 0.3)))
    assert np.allclose(out.color, [0.1, 0.2, 0.3])
    assert np.all(out.i_max == -1)


def test_tiled_matches_reference(rng):
    for k in range(15):
        cam = random_camera(rng, width=int(rng.integers(8, 48)), height=int(rng.integers(8, 48)))
        gs = random_gaussians(rng, int(rng.integers(1, 80)), sh_degree=int(rng.integers(0, 4)))
        bg = rng.uniform(0, 1, 3)
        out = render(gs, cam, RenderOptions(background=bg))
        ref = render_reference(gs, cam, bg)
        assert np.array_equal(out.i_max, ref.i_max)
        assert np.abs(out.color - ref.color).max() <= 1e-5
        assert np.allclose(out.alpha, ref.alpha, atol=1e-9)
        assert np.array_equal(out.max_contrib, ref.max_contrib)


def test_max_contrib_partitions_pixels(rng):
    cam = random_camera(rng, 40, 24)
    gs = random_gaussians(rng, 60)
    out = render(gs, cam)
    assert out.max_contrib.sum() + np.sum(out.i_max == -1) == cam.width * cam.height
    assert np.all(out.weight_sum >= 0)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_tile_size_invariance(rng):
    cam = random_camera(rng, 37, 29)
    gs = random_gaussians(rng, 50, sh_degree=2)
    base = render(gs, cam)
    for ts in (4, 8, 32):
        other = render(gs, cam, RenderOptions(tile_size=ts))
        assert np.array_equal(base.i_max, other.i_max)
        assert np.allclose(base.color, other.color, atol=1e-12)
        assert np.array_equal(base.max_contrib, other.max_contrib)


def test_weight_sum_additive_over_half_images(rng):
    cam = random_camera(rng, 32, 32)
    gs = random_gaussians(rng, 40)
    full = render(gs, cam)
    left = Camera(16, 32, cam.fx, cam.fy, cam.cx, cam.cy, cam.R, cam.t)
    right = Camera(16, 32, cam.fx, cam.fy, cam.cx - 16, cam.cy, cam.R, cam.t)
    total = render(gs, left).weight_sum + render(gs, right).weight_sum
    assert np.allclose(total, full.weight_sum, atol=1e-9)


def test_transmittance_monotone(rng):
    cam = random_camera(rng, 24, 24)
    gs = random_gaussians(rng, 40)
    ref = render_reference(gs, cam, keep_weights=True)
    w = ref.weights
    # cumulative weight along the depth order never exceeds 1
    order = np.lexsort((np.arange(len(gs)), project(gs, cam).depths))
    cum = np.cumsum(w[order], axis=0)
    assert np.all(cum <= 1 + 1e-12)
    assert np.all(np.diff(1 - cum, axis=0) <= 1e-15)


def test_index_visualization():
    cam = axis_camera(16)
    out = render(GaussianSet.empty(), cam)
    assert not render_index_visualization(out).any()
    out.i_max[:] = 7
    img = render_index_visualization(out, seed=3)
    assert np.all(img == img[0, 0])
    assert np.array_equal(img, render_index_visualization(out, seed=3))


def test_index_visualization_png_golden(tmp_path, rng):
    from minisplat.scene import write_png
    cam = random_camera(rng)
    out = render(random_gaussians(rng, 30), cam)
    paths = [tmp_path / "a.png", tmp_path / "b.png"]
    for p in paths:
        write_png(p, render_index_visualization(out, seed=5))
    assert paths[0].read_bytes() == paths[1].read_bytes()
