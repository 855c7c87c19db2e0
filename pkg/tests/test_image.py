import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from llgm.image import (ImageDecodeError, as_image, gaussian_blur, gaussian_kernel, grad_xy, grad_xy_adjoint,
                        load_image, luminance, patch_means, quantize, resize_bilinear, sample_bilinear,
                        save_image)


def test_as_image_promotes_2d_and_rejects_nan():
    assert as_image(np.zeros((4, 5))).shape == (4, 5, 1)
    with pytest.raises(ValueError):
        as_image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        as_image(np.zeros(7))


def test_png_round_trip_is_lossless_for_byte_values(tmp_path, rng):
    q = rng.integers(0, 256, (9, 11, 3)).astype(np.uint8)
    save_image(q / 255.0, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert np.array_equal(quantize(back), q)


def test_gray_png_loads_single_channel(tmp_path):
    Image.fromarray(np.full((3, 4), 51, np.uint8), mode="L").save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (3, 4, 1)
    assert img[0, 0, 0] == pytest.approx(0.2)


def test_ppm_is_accepted(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / "w.ppm")
    assert load_image(tmp_path / "w.ppm").min() == 1.0


def test_rgba_alpha_is_dropped(tmp_path):
    px = np.zeros((2, 2, 4), np.uint8)
    px[..., 0] = 200
    px[..., 3] = 10
    Image.fromarray(px, mode="RGBA").save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    assert img.shape == (2, 2, 3) and img[0, 0, 0] == pytest.approx(200 / 255)


def test_sixteen_bit_png_is_rejected_with_mode(tmp_path):
    Image.fromarray(np.full((2, 2), 40000, np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageDecodeError, match="mode"):
        load_image(tmp_path / "deep.png")


def test_other_formats_are_rejected_by_name(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "x.bmp")
    with pytest.raises(ImageDecodeError, match="BMP"):
        load_image(tmp_path / "x.bmp")


def test_garbage_file_raises_decode_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG not really")
    with pytest.raises(ImageDecodeError):
        load_image(tmp_path / "bad.png")


def test_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_quantize_rounds_half_up_and_clamps():
    v = np.array([-0.2, 0.5 / 255, 1.5 / 255, 0.999, 1.7])
    assert quantize(v).tolist() == [0, 1, 2, 255, 255]


def test_luminance_weights():
    px = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    assert luminance(px)[0, :, 0] == pytest.approx([0.299, 0.587, 0.114])
    assert np.array_equal(luminance(np.full((2, 2, 3), 0.37)), np.full((2, 2, 1), 0.37))


def test_resize_half_pixel_oracle():
    # 2x upsampling of [0, 1]: output centres sit at -0.25, 0.25, 0.75, 1.25 in input space
    row = np.array([[[0.0], [1.0]]])
    out = resize_bilinear(row, 1, 4)[0, :, 0]
    assert out == pytest.approx([0.0, 0.25, 0.75, 1.0])


def test_resize_downsample_averages_pairs():
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    out = resize_bilinear(img, 2, 2)[..., 0]
    assert np.allclose(out, [[2.5, 4.5], [10.5, 12.5]])


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((3, 3, 1)), 0, 3)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.floats(0, 1))
def test_resize_preserves_constants(h, w, nh, nw, c):
    out = resize_bilinear(np.full((h, w, 2), c), nh, nw)
    assert out.shape == (nh, nw, 2)
    assert np.allclose(out, c)


def test_gaussian_kernel_radius_and_normalization():
    k = gaussian_kernel(1.5)
    assert len(k) == 2 * 5 + 1
    assert k.sum() == pytest.approx(1.0)
    assert len(gaussian_kernel(0.1)) == 3


def test_blur_preserves_mean_and_constants(rng):
    img = rng.uniform(size=(20, 17, 1))
    assert gaussian_blur(img, 2.0).mean() == pytest.approx(img.mean(), rel=1e-12)
    assert np.allclose(gaussian_blur(np.full((5, 6, 3), 0.3), 4.0), 0.3)


def test_grad_xy_last_row_and_column_are_zero(rng):
    gx, gy = grad_xy(rng.uniform(size=(5, 6, 2)))
    assert not gx[:, -1].any() and not gy[-1, :].any()


@given(arrays(np.float64, (4, 5, 2), elements=st.floats(-1, 1)),
       arrays(np.float64, (4, 5, 2), elements=st.floats(-1, 1)),
       arrays(np.float64, (4, 5, 2), elements=st.floats(-1, 1)))
def test_grad_adjoint_identity(x, a, b):
    gx, gy = grad_xy(x)
    lhs = (gx * a).sum() + (gy * b).sum()
    rhs = (x * grad_xy_adjoint(a, b)).sum()
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_patch_means_handles_ragged_edges():
    img = np.arange(15, dtype=float).reshape(3, 5, 1)
    m = patch_means(img, 2)
    assert m.shape == (2, 3, 1)
    assert m[0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)
    assert m[1, 2, 0] == pytest.approx(14.0)      # single pixel corner tile
    assert m[0, 2, 0] == pytest.approx((4 + 9) / 2)


def test_sample_bilinear_matches_grid_and_midpoints():
    img = np.arange(12, dtype=float).reshape(3, 4, 1)
    pts = np.array([[0.0, 0.0], [3.0, 2.0], [1.5, 0.5], [-5.0, 9.0]])
    out = sample_bilinear(img, pts)[:, 0]
    assert out == pytest.approx([0.0, 11.0, (1 + 2 + 5 + 6) / 4, 8.0])
