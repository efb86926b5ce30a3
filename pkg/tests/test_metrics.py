import math

import numpy as np
import pytest

from minisplat.metrics import EvalReport, psnr, ssim
from oracles import naive_ssim


def test_psnr_values(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == math.inf
    b = np.full((4, 4, 3), 0.5)
    assert psnr(b, b + 0.1) == pytest.approx(20.0, abs=1e-9)
    c = rng.uniform(0, 1, (8, 8, 3))
    assert abs(psnr(a, c) - 10 * np.log10(1 / np.mean((a - c) ** 2))) < 1e-9
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_ssim_identical_and_reference(rng):
    a = rng.uniform(0, 1, (20, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-6
    c = np.full((16, 16, 3), 0.4)
    assert 0.99 < ssim(c, c + 1e-3) <= 1.0
    with pytest.raises(ValueError):
        ssim(a, a[:, :3])


def test_symmetry_and_channel_permutation(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    p = [2, 0, 1]
    assert psnr(a[..., p], b[..., p]) == pytest.approx(psnr(a, b), abs=1e-12)
    assert ssim(a[..., p], b[..., p]) == pytest.approx(ssim(a, b), abs=1e-14)


def test_eval_report(tmp_path, rng):
    r = EvalReport(num_gaussians=1500)
    a = rng.uniform(0, 1, (8, 8, 3))
    r.add("v0", a, np.clip(a + 0.05, 0, 1))
    r.add("v1", a, a * 0.9)
    d = r.to_dict()
    assert d["num_gaussians_millions"] == 0.0015
    assert -1 <= r.mean_ssim <= 1 and r.mean_psnr > 0
    r.write_json(tmp_path / "e.json")
    r.write_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "view,psnr,ssim,lpips" and len(lines) == 3
