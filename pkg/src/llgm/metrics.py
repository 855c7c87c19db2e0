"""Full-reference (PSNR, SSIM) and no-reference (LOE, DE, EME) quality metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .image import as_image, luminance, patch_index, quantize, resize_bilinear

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WIN = 11
SSIM_SIGMA = 1.5
LOE_SIZE = 100
LOE_SAMPLES = 500
EME_DELTA = 1e-4


def _check_pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def _gray(img: np.ndarray) -> np.ndarray:
    return luminance(img)[:, :, 0] if img.shape[2] == 3 else img[:, :, 0]


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _window() -> np.ndarray:
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_WIN = _window()
_R = SSIM_WIN // 2


def _filter_valid(x: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(x, _WIN, axis=0, mode="constant")
    out = ndimage.correlate1d(out, _WIN, axis=1, mode="constant")
    return out[_R:x.shape[0] - _R, _R:x.shape[1] - _R]


def _filter_valid_adjoint(g: np.ndarray) -> np.ndarray:
    full = np.zeros((g.shape[0] + 2 * _R, g.shape[1] + 2 * _R) + g.shape[2:])
    full[_R:-_R, _R:-_R] = g
    out = ndimage.correlate1d(full, _WIN, axis=0, mode="constant")
    return ndimage.correlate1d(out, _WIN, axis=1, mode="constant")


def _chan(arrs):
    return [a if a.ndim == 3 else a[:, :, None] for a in arrs]


def _unchan(a, c):
    return a if c is not None else a[:, :, 0]


def ssim_with_grad(x: np.ndarray, y: np.ndarray, want_grad: bool = True):
    """Mean SSIM of ``x`` against ``y`` and its gradient w.r.t. ``x``.

    Arrays are ``(H, W)`` or ``(H, W, C)``; with channels the score is the
    mean over channels.  Windows are 'valid' (no padding).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(x.shape[:2]) < SSIM_WIN:
        raise ValueError(f"SSIM needs images at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[:2]}")
    c = x.shape[2] if x.ndim == 3 else None
    stats = _filter_valid(np.concatenate(_chan([x, y, x * x, y * y, x * y]), axis=2))
    mx, my, mxx, myy, mxy = (_unchan(s, c) for s in np.split(stats, 5, axis=2))
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (mxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (mxx - mx * mx) + (myy - my * my) + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    score = float(smap.mean())
    if not want_grad:
        return score, None
    n = smap.size
    d_mx = (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * smap * (1 / b1 - 1 / b2)) / n
    d_mxx = -smap / b2 / n
    d_mxy = 2 * a1 / (b1 * b2) / n
    back = _filter_valid_adjoint(np.concatenate(_chan([d_mx, d_mxx, d_mxy]), axis=2))
    b_mx, b_mxx, b_mxy = (_unchan(s, c) for s in np.split(back, 3, axis=2))
    grad = b_mx + 2 * x * b_mxx + y * b_mxy
    return score, grad


def ssim(a, b, per_channel: bool = False) -> float:
    """Mean local SSIM; colour images are compared on luminance by default."""
    a, b = _check_pair(a, b)
    if per_channel or a.shape[2] == 1:
        return ssim_with_grad(a, b, want_grad=False)[0]
    return ssim_with_grad(_gray(a), _gray(b), want_grad=False)[0]


def _lightness(img: np.ndarray) -> np.ndarray:
    return img.max(axis=2)


def loe(enhanced, original, seed: int = 0, samples: int = LOE_SAMPLES) -> float:
    """Lightness order error, estimated from seeded random pixel pairs.

    Lightness is the per-pixel channel maximum.  Both images are shrunk to fit
    within 100x100; every pixel is compared against the same ``samples``
    random pixels and the flip rate is scaled to the all-pairs count, so the
    value estimates the full pairwise definition on the shrunken grid.
    """
    enhanced, original = _check_pair(enhanced, original)
    h, w = original.shape[:2]
    r = min(1.0, LOE_SIZE / max(h, w))
    nh, nw = max(1, round(h * r)), max(1, round(w * r))
    le = resize_bilinear(_lightness(enhanced)[:, :, None], nh, nw).ravel()
    lo = resize_bilinear(_lightness(original)[:, :, None], nh, nw).ravel()
    n = le.size
    idx = np.random.default_rng(seed).integers(0, n, size=samples)
    flips = (lo[:, None] >= lo[idx][None, :]) != (le[:, None] >= le[idx][None, :])
    return float(flips.mean() * n)


def discrete_entropy(img) -> float:
    img = as_image(img)
    levels = quantize(_gray(img)).ravel()
    hist = np.bincount(levels, minlength=256).astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def eme(img, block: int = 8) -> float:
    img = as_image(img)
    g = _gray(img)
    ids, counts, (gh, gw) = patch_index(*g.shape, block)
    labels = np.arange(gh * gw)
    hi = ndimage.maximum(g, ids, labels)
    lo = ndimage.minimum(g, ids, labels)
    vals = 20.0 * np.log10((np.asarray(hi) + EME_DELTA) / (np.asarray(lo) + EME_DELTA))
    return float(vals.mean())


@dataclass
class MetricsReport:
    psnr: float | None = None
    ssim: float | None = None
    loe: float | None = None
    de: float | None = None
    eme: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(pred, ref=None, original=None) -> MetricsReport:
    """Compute every metric the inputs allow.

    ``ref`` enables PSNR/SSIM; LOE compares ``pred`` against ``original``,
    falling back to ``ref`` when no original is given.
    """
    pred = as_image(pred)
    rep = MetricsReport(de=discrete_entropy(pred), eme=eme(pred))
    if ref is not None:
        rep.psnr = psnr(pred, ref)
        rep.ssim = ssim(pred, ref)
    base = original if original is not None else ref
    if base is not None:
        rep.loe = loe(pred, base)
    return rep
