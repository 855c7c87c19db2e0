import numpy as np
import pytest

from llgm.gaussians import LOG_SCALE_FLOOR
from llgm.image import resize_bilinear
from llgm.metrics import psnr
from llgm.reconstruct import (ReconConfig, build_pyramid_targets, cascade, fit, init_gaussians, photometric_loss,
                              pyramid_dims)

from conftest import fixture_rgb


def test_pyramid_dims_halve_per_level():
    assert pyramid_dims(128, 96, 2) == [(64, 48), (128, 96)]
    assert pyramid_dims(33, 17, 3) == [(8, 4), (16, 8), (33, 17)]
    assert pyramid_dims(5, 5, 1) == [(5, 5)]


def test_level_counts_follow_split():
    assert ReconConfig(num_primitives=2000).level_counts() == [500, 1500]
    assert sum(ReconConfig(num_primitives=1001, scales=3).level_counts()) == 1001


@pytest.mark.parametrize("kw", [dict(num_primitives=0), dict(scales=0), dict(iterations=-1), dict(lr=0.0),
                                dict(ssim_weight=1.5), dict(split=(0.5, 0.6)), dict(split=(1.0,)),
                                dict(mode="max"), dict(num_primitives=1, scales=2)])
def test_invalid_configs_are_rejected(kw):
    with pytest.raises(ValueError):
        ReconConfig(**kw).validate()


def test_paper_preset():
    cfg = ReconConfig.paper()
    assert (cfg.num_primitives, cfg.iterations, cfg.lr, cfg.ssim_weight) == (70_000, 20_000, 0.01, 0.7)


def test_single_scale_target_is_the_image(rng):
    img = rng.uniform(size=(12, 10, 3))
    assert np.array_equal(build_pyramid_targets(img, 1)[0], img)


def test_perfect_coarse_level_leaves_zero_mean_residual():
    img = fixture_rgb("coffee")
    coarse = build_pyramid_targets(img, 2)[0]
    t = build_pyramid_targets(img, 2, [coarse])
    assert t[1].shape == img.shape
    assert abs(t[1].mean()) < 1e-3
    flat = np.full((16, 16, 3), 0.3)
    assert np.allclose(build_pyramid_targets(flat, 2, [np.full((8, 8, 3), 0.3)])[1], 0.0)


def test_residual_is_not_clamped():
    img = np.full((8, 8, 3), 0.2)
    t = build_pyramid_targets(img, 2, [np.full((4, 4, 3), 0.5)])[1]
    assert np.allclose(t, -0.3)


def test_photometric_loss_zero_and_l1():
    r = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert photometric_loss(r, r, 0.7)[0] == pytest.approx(0.0, abs=1e-12)
    assert photometric_loss(r + 0.1, r, 0.0)[0] == pytest.approx(0.1)


def test_photometric_loss_gradient_matches_finite_differences():
    g = np.random.default_rng(1)
    r, t = g.uniform(size=(16, 16, 3)), g.uniform(size=(16, 16, 3))
    loss, grad = photometric_loss(r, t, 0.7)
    h = 1e-6
    for idx in [(0, 0, 0), (7, 8, 1), (15, 3, 2), (5, 15, 0), (10, 10, 1)]:
        p, m = r.copy(), r.copy()
        p[idx] += h
        m[idx] -= h
        num = (photometric_loss(p, t, 0.7)[0] - photometric_loss(m, t, 0.7)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(num, rel=1e-3, abs=1e-5)


def test_small_levels_skip_ssim():
    r = np.zeros((8, 8, 3))
    assert photometric_loss(r + 0.2, r, 0.7)[0] == pytest.approx(0.3 * 0.2)


def test_init_grid_spacing_and_colours():
    img = np.full((32, 32, 3), 0.4)
    lv = init_gaussians(img, 64, seed=3)
    assert lv.count == 64
    assert np.allclose(lv.color, 0.4)
    assert np.allclose(np.exp(lv.log_scale.astype(float)), 0.5 * 32 / 8, rtol=1e-6)
    cells = np.floor((lv.mu + 0.5) / 4).astype(int)
    assert len({tuple(c) for c in cells}) == 64            # one primitive per grid cell
    assert np.all(lv.log_scale >= np.float32(LOG_SCALE_FLOOR))


def test_init_is_deterministic_per_seed_and_level():
    img = np.random.default_rng(0).uniform(size=(20, 30, 3))
    a, b = init_gaussians(img, 50, seed=1), init_gaussians(img, 50, seed=1)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.color, b.color)
    assert not np.array_equal(a.mu, init_gaussians(img, 50, seed=1, level=1).mu)


def test_zero_iterations_returns_frozen_initialization():
    img = fixture_rgb("rocket")
    res = fit(img, ReconConfig(num_primitives=200, iterations=0))
    assert res.model.frozen
    assert res.psnr == res.initial_psnr
    assert [lv.count for lv in res.model.levels] == [50, 150]


def test_constant_red_image_fits_quickly():
    img = np.zeros((64, 64, 3))
    img[..., 0] = 1.0
    res = fit(img, ReconConfig(num_primitives=100, iterations=500, seed=0))
    for trace in res.history:
        assert trace[-1] < trace[0] / 5
    assert res.psnr > res.initial_psnr


def test_short_fit_improves_and_cascade_matches(tmp_path):
    img = resize_bilinear(fixture_rgb("chelsea"), 48, 48)
    res = fit(img, ReconConfig(num_primitives=300, iterations=150), log_csv=tmp_path / "fit.csv")
    assert res.psnr > res.initial_psnr + 3
    assert psnr(cascade(res.model), img) == pytest.approx(res.psnr, abs=0.05)   # float32 storage
    rows = (tmp_path / "fit.csv").read_text().splitlines()
    assert rows[0] == "level,iteration,loss,psnr" and len(rows) == 1 + 2 * 150


def test_fit_requires_colour_input():
    with pytest.raises(ValueError):
        fit(np.zeros((16, 16, 1)), ReconConfig(num_primitives=10, iterations=0))
