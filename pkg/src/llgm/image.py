"""Pixel buffers and the small set of image operators the pipeline needs.

Images are plain ``float64`` numpy arrays of shape ``(H, W, C)``.  Photos have
``C`` in {1, 3}; weight and coefficient maps reuse the layout with more
channels.  Values live in [0, 1] except for residual-pyramid targets, which
are signed and never clamped.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded as an 8-bit PNG/PPM image."""


def as_image(arr) -> np.ndarray:
    """Coerce an array to the canonical ``(H, W, C)`` float64 layout."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise ValueError(f"expected an (H, W, C) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


_ACCEPTED_MODES = {"L": "L", "1": "L", "LA": "L", "RGB": "RGB", "RGBA": "RGB", "P": "RGB"}


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM into an ``(H, W, C)`` array in [0, 1].

    Grayscale files give one channel, everything else three.  Alpha is
    discarded.
    """
    path = os.fspath(path)
    try:
        with PILImage.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "PPM"):
                raise ImageDecodeError(f"{path}: unsupported format {fmt!r} (PNG or PPM only)")
            if im.mode not in _ACCEPTED_MODES:
                raise ImageDecodeError(
                    f"{path}: unsupported {fmt} pixel mode {im.mode!r} (8-bit gray/RGB only)"
                )
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            im = im.convert(_ACCEPTED_MODES[im.mode])
            data = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except ImageDecodeError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return as_image(data.astype(np.float64) / 255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-away-from-zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an image as an 8-bit PNG, clamping to [0, 1] first."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 3 and img.shape[2] != 3:
        raise ValueError(f"can only save 1- or 3-channel images, got {img.shape[2]}")
    q = quantize(img)
    PILImage.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(os.fspath(path), format="PNG")


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a 3-channel image, returned as ``(H, W, 1)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"luminance needs a 3-channel image, got shape {img.shape}")
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    # same linear map as img @ LUMA_WEIGHTS, but exact for gray pixels
    return (g + LUMA_WEIGHTS[0] * (r - g) + LUMA_WEIGHTS[2] * (b - g))[:, :, None]


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centred sample positions."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be at least 1x1, got {new_h}x{new_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h, new_h)
    x0, x1, fx = _bilinear_axis(w, new_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows = img[y0] * (1.0 - fy) + img[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps truncated at radius ``ceil(3 sigma)``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirrored (edge-repeating) borders."""
    k = gaussian_kernel(sigma)
    img = np.asarray(img, dtype=np.float64)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def grad_xy(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences; the mirrored border makes the last column/row zero."""
    img = np.asarray(img, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def grad_xy_adjoint(dgx: np.ndarray, dgy: np.ndarray) -> np.ndarray:
    """Transpose of :func:`grad_xy` applied to upstream gradients."""
    out = np.zeros_like(dgx)
    out[:, 1:] += dgx[:, :-1]
    out[:, :-1] -= dgx[:, :-1]
    out[1:, :] += dgy[:-1, :]
    out[:-1, :] -= dgy[:-1, :]
    return out


def patch_index(h: int, w: int, patch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel patch id for a non-overlapping tiling, plus the grid counts.

    Returns ``(ids, counts, grid_shape)`` where ``ids`` is ``(H, W)``.
    """
    if patch < 1:
        raise ValueError(f"patch size must be >= 1, got {patch}")
    gh, gw = -(-h // patch), -(-w // patch)
    rows = np.arange(h) // patch
    cols = np.arange(w) // patch
    ids = rows[:, None] * gw + cols[None, :]
    counts = np.bincount(ids.ravel(), minlength=gh * gw).astype(np.float64)
    return ids, counts, np.array([gh, gw])


def patch_means(img: np.ndarray, patch: int) -> np.ndarray:
    """Means over non-overlapping ``patch`` x ``patch`` tiles.

    Ragged edge tiles average only the pixels they actually contain.  The
    result has shape ``(ceil(H/patch), ceil(W/patch), C)``.
    """
    img = as_image(img)
    h, w, c = img.shape
    ids, counts, (gh, gw) = patch_index(h, w, patch)
    out = np.empty((gh * gw, c))
    flat = ids.ravel()
    for ch in range(c):
        out[:, ch] = np.bincount(flat, weights=img[:, :, ch].ravel(), minlength=gh * gw) / counts
    return out.reshape(gh, gw, c)


def sample_bilinear(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sample ``img`` at continuous ``(x, y)`` pixel coordinates, edge-clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x = np.clip(np.asarray(xy, dtype=np.float64)[:, 0], 0.0, w - 1)
    y = np.clip(np.asarray(xy, dtype=np.float64)[:, 1], 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy
