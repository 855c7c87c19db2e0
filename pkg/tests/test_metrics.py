import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llgm.metrics import MetricsReport, discrete_entropy, eme, evaluate, loe, psnr, ssim, ssim_with_grad

from conftest import fixture_rgb


def test_psnr_cap_and_reference_values():
    img = fixture_rgb("camera")
    assert psnr(img, img) == 99.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identity_and_symmetry(rng):
    a, b = fixture_rgb("coffee"), fixture_rgb("rocket")
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 0.9
    assert ssim(a, a, per_channel=True) == pytest.approx(1.0, abs=1e-6)


def test_ssim_of_black_and_white_is_near_zero():
    assert ssim(np.zeros((16, 16, 1)), np.ones((16, 16, 1))) == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-6)


def test_ssim_gradient_matches_finite_differences(rng):
    x, y = rng.uniform(size=(16, 17, 3)), rng.uniform(size=(16, 17, 3))
    _, g = ssim_with_grad(x, y)
    h = 1e-6
    for idx in [(0, 0, 0), (8, 8, 1), (15, 16, 2), (3, 12, 0)]:
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        num = (ssim_with_grad(p, y, False)[0] - ssim_with_grad(m, y, False)[0]) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_ssim_needs_a_full_window():
    with pytest.raises(ValueError):
        ssim_with_grad(np.zeros((10, 20)), np.zeros((10, 20)))


def test_loe_zero_for_identity_and_monotone_maps():
    img = fixture_rgb("chelsea")
    assert loe(img, img) == 0.0
    small = img[:96, :80]                          # no shrink, so lightness order is exact
    assert loe(np.sqrt(small), small) == 0.0


def test_loe_detects_inversion():
    img = fixture_rgb("chelsea")
    assert loe(1.0 - img, img) > 1000


def test_loe_is_deterministic_and_bounded(rng):
    a, b = rng.uniform(size=(40, 30, 3)), rng.uniform(size=(40, 30, 3))
    assert loe(a, b) == loe(a, b)
    assert 0 <= loe(a, b) <= a.shape[0] * a.shape[1]


def test_discrete_entropy_reference_values():
    assert discrete_entropy(np.full((8, 8, 3), 0.3)) == 0.0
    ramp = (np.arange(256) / 255.0).reshape(16, 16, 1)
    assert discrete_entropy(ramp) == pytest.approx(8.0)
    half = np.repeat([0.0, 1.0], 32).reshape(8, 8, 1)
    assert discrete_entropy(half) == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_discrete_entropy_range(seed):
    img = np.random.default_rng(seed).uniform(size=(12, 12, 3))
    assert 0.0 <= discrete_entropy(img) <= 8.0


def test_eme_reference_values():
    assert eme(np.full((16, 16, 3), 0.5)) == 0.0
    block = np.full((8, 8, 1), 0.1)
    block[0, 0] = 0.9
    expect = 20 * math.log10((0.9 + 1e-4) / (0.1 + 1e-4))
    assert eme(block) == pytest.approx(expect)
    assert eme(np.tile(block, (2, 3, 1))) == pytest.approx(expect)


def test_report_omits_missing_entries():
    img = fixture_rgb("rocket")
    rep = evaluate(img)
    assert set(rep.to_dict()) == {"de", "eme"}
    full = evaluate(img, img)
    assert full.psnr == 99.0 and full.ssim == pytest.approx(1.0) and full.loe == 0.0
    assert set(json.loads(full.to_json())) == {"psnr", "ssim", "loe", "de", "eme"}
    assert MetricsReport(de=1.0).to_dict() == {"de": 1.0}


def test_original_drives_loe_without_reference():
    img = fixture_rgb("rocket")
    rep = evaluate(np.clip(img * 1.5, 0, 1), original=img)
    assert rep.psnr is None and rep.loe is not None
