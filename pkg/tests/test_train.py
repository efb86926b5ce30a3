import numpy as np
import pytest

from minisplat.core import GaussianSet
from minisplat.pipeline import TrainConfig, run_pipeline, scaled
from minisplat.raster import render
from minisplat.train import PARAM_GROUPS, Adam, LearningRates, ParamGradients, backward, exp_lr, loss
from oracles import fd_entries, fd_matches, naive_ssim, random_camera, random_gaussians


def test_loss_examples(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert loss(a, a) == pytest.approx(0.0, abs=1e-12)
    assert loss(np.zeros((8, 8, 3)), np.ones((8, 8, 3)), lam=0.0) == 1.0
    b = rng.uniform(0, 1, (16, 16, 3))
    expect = 0.8 * np.mean(np.abs(a - b)) + 0.2 * (1 - naive_ssim(a, b))
    assert abs(loss(a, b) - expect) < 1e-6
    assert loss(a, b) > 0
    with pytest.raises(ValueError):
        loss(a, b[:8])


def test_zero_loss_gives_zero_gradients(rng):
    cam = random_camera(rng)
    gs = random_gaussians(rng, 20)
    target = render(gs, cam).color
    value, grads, _ = backward(gs, cam, target)
    assert value == pytest.approx(0.0, abs=1e-12)
    for name in PARAM_GROUPS:
        assert np.abs(grads.group(name)).max() < 1e-10


def test_gradients_match_finite_differences(rng):
    for k in range(3):
        cam = random_camera(rng)
        gs = random_gaussians(rng, 24, sh_degree=k + 1)
        target = rng.uniform(0, 1, (cam.height, cam.width, 3))
        _, grads, _ = backward(gs, cam, target)
        for name in PARAM_GROUPS:
            g = grads.group(name).reshape(-1)
            nz = np.nonzero(g)[0]
            entries = rng.choice(nz, size=min(5, len(nz)), replace=False)
            num = fd_entries(gs, cam, target, name, entries)
            assert np.all(fd_matches(g[entries], num)), name


def _single_param_set(x0):
    return GaussianSet(np.zeros((1, 3)), np.zeros((1, 3)), [[1.0, 0, 0, 0]], [x0], np.zeros((1, 16, 3)))


def test_adam_quadratic_converges():
    gs = _single_param_set(-2.0)
    adam = Adam(LearningRates(opacity=0.05))
    for it in range(1, 501):
        x = gs.opacity_logits[0]
        grads = ParamGradients(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 4)),
                               np.array([2.0 * (x - 3.0)]), np.zeros((1, 16, 3)))
        adam.step(gs, grads, it)
    assert abs(gs.opacity_logits[0] - 3.0) < 1e-6


def test_adam_zero_gradient_no_change(rng):
    gs = random_gaussians(rng, 5, sh_degree=2)
    before = gs.copy()
    z = ParamGradients(np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 4)), np.zeros(5), np.zeros((5, 16, 3)))
    Adam().step(gs, z, 1)
    for name in ("means", "log_scales", "opacity_logits", "sh"):
        assert np.array_equal(getattr(gs, name), getattr(before, name))
    # renormalizing an already unit quaternion may move the last bit
    assert np.abs(gs.quats - before.quats).max() < 1e-15


def test_lr_schedule_endpoints():
    lrs = LearningRates()
    assert exp_lr(0, 1.6e-4, 1.6e-6, 3000) == 1.6e-4
    assert exp_lr(3000, 1.6e-4, 1.6e-6, 3000) == 1.6e-6
    adam = Adam(lrs, spatial_scale=2.0, position_decay_steps=1500)
    assert adam.position_lr(0) == lrs.position_init * 2.0
    assert adam.position_lr(1500) == lrs.position_final * 2.0


def test_adam_remap():
    adam = Adam()
    gs = _single_param_set(0.0).concat(_single_param_set(1.0))
    g = ParamGradients(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 4)), np.ones(2), np.ones((2, 16, 3)))
    adam.step(gs, g, 1)
    adam.remap(np.array([1, -1, 0]))
    assert adam.m["opacity_logits"].shape == (3,)
    assert adam.m["opacity_logits"][1] == 0.0 and adam.m["opacity_logits"][0] != 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(simplification1=25000, simplification2=20000)
    with pytest.raises(ValueError):
        TrainConfig(lambda_dssim=1.5)
    with pytest.raises(ValueError):
        TrainConfig(keep_ratio=0.0)
    assert scaled(30000, 0.05) == 1500 and scaled(100, 0.001) == 1
    cfg = TrainConfig(scale=0.05)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# a tiny schedule: 300 iterations, densify every 10, reinit at 50/100, simplify at 150 and 200
TINY = dict(scale=0.01, densify_interval=1000, densify_from=1000, reinit_points=600, log_interval=5000)


@pytest.fixture(scope="module")
def tiny_runs(plane_scene):
    cfg = TrainConfig(**TINY)
    return {v: run_pipeline(plane_scene, v, cfg) for v in ("mini", "mini-d")}


def test_mini_d_never_simplifies(tiny_runs):
    ev = tiny_runs["mini-d"].events
    assert not any(e["event"].startswith("binarize") for e in ev)
    for e in ev:
        if e["iter"] >= 150:
            assert e["n_after"] >= e["n_before"]


def test_mini_simplification_points(tiny_runs):
    ev = {e["iter"]: e for e in tiny_runs["mini"].events if e["event"].startswith("binarize")}
    assert set(ev) == {150, 200}
    assert ev[150]["n_after"] < ev[150]["n_before"]
    levels = [(e["iter"], e["sh_degree"]) for e in tiny_runs["mini"].events]
    assert all(lvl == 0 for it, lvl in levels if it < 150)
    assert max(lvl for it, lvl in levels) == 3
    assert tiny_runs["mini"].gaussians.sh_degree == 3


def test_reinit_events(tiny_runs):
    ev = [(e["iter"], e["event"]) for e in tiny_runs["mini"].events]
    assert (50, "depth_reinit") in ev and (100, "depth_reinit") in ev


def test_training_improves(tiny_runs, plane_scene):
    from minisplat.pipeline import evaluate, init_from_points
    p0, _ = evaluate(init_from_points(plane_scene.points, plane_scene.point_colors),
                     plane_scene.test_views(), plane_scene.background)
    # reinit at 50 and 100 leaves the tiny runs little time, so only ask for a clear gain there
    for r in tiny_runs.values():
        assert r.test_psnr > p0 + 1.0
        assert np.all(np.isfinite(r.losses))
    cfg = TrainConfig(scale=0.01, depth_reinit=False, densify_interval=1000, densify_from=1000,
                      log_interval=5000)
    r = run_pipeline(plane_scene, "mini-d", cfg)
    assert r.test_psnr > p0 + 6.0


def test_pipeline_leaves_scene_untouched(plane_scene):
    pts, cols = plane_scene.points.copy(), plane_scene.point_colors.copy()
    cfg = TrainConfig(scale=0.002, depth_reinit=False, densify_interval=5000, log_interval=5000)
    a = run_pipeline(plane_scene, "mini", cfg)
    assert np.array_equal(plane_scene.points, pts) and np.array_equal(plane_scene.point_colors, cols)
    b = run_pipeline(plane_scene, "mini", cfg)
    assert np.array_equal(a.gaussians.means, b.gaussians.means)


def test_run_outputs(tmp_path, plane_scene):
    from minisplat.pipeline import load_optimizer
    cfg = TrainConfig(scale=0.002, depth_reinit=False, densify_interval=5000, log_interval=5000)
    res = run_pipeline(plane_scene, "mini", cfg, out_dir=tmp_path)
    for name in ("metrics.csv", "timing.csv", "events.json", "point_cloud.ply", "optimizer.json", "run.json"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "iter,loss,psnr,ssim,num_gaussians"
    adam, it = load_optimizer(tmp_path / "optimizer.json")
    assert it == 60 and adam.m["means"].shape == (len(res.gaussians), 3)
    with pytest.raises(ValueError):
        run_pipeline(plane_scene, "other", cfg)
