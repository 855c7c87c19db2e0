"""Tile-based differentiable splatting of 2D Gaussians.

Primitives are binned into 16x16 pixel tiles by their 3-sigma box.  Each tile
is processed independently (``prange``); within a pixel, primitives are
composited in ascending index order, which stands in for depth order.  The
backward pass recomputes the per-pixel transmittance chain front-to-back and
then walks it back-to-front, so no division by ``1 - alpha G`` is needed.
Per-primitive gradients are first written into one row per (tile, primitive)
entry and reduced serially in tile order, which keeps results bit-identical
regardless of thread scheduling.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange
from scipy import sparse

if "NUMBA_THREADING_LAYER" not in os.environ:
    try:
        from numba.np.ufunc import omppool  # noqa: F401
        numba.config.THREADING_LAYER = "omp"
    except ImportError:
        pass

TILE = 16
T_MIN = 1e-4
ALPHA, SUM = "alpha", "sum"
_MODES = {ALPHA: 0, SUM: 1}
MODES = tuple(_MODES)

# per-entry gradient layout: mu_x, mu_y, log_sx, log_sy, theta, opacity_logit, attrs...
_NG = 6


@dataclass
class RenderOutput:
    image: np.ndarray        # (H, W, C), unclamped
    accum_opacity: np.ndarray  # (H, W, 1)
    n_contrib: np.ndarray    # (H, W) int32, primitives composited per pixel


@dataclass
class RenderGrads:
    mu: np.ndarray
    log_scale: np.ndarray
    theta: np.ndarray
    attrs: np.ndarray
    opacity_logit: np.ndarray


@njit(cache=True)
def _prepare(mu, log_scale, theta, opacity_logit, h, w):
    n = mu.shape[0]
    geo = np.empty((n, 5))          # cos, sin, 1/sx^2, 1/sy^2, alpha
    box = np.full((n, 4), -1, np.int64)
    for i in range(n):
        cs = math.cos(theta[i])
        sn = math.sin(theta[i])
        sx2 = math.exp(2.0 * log_scale[i, 0])
        sy2 = math.exp(2.0 * log_scale[i, 1])
        geo[i, 0] = cs
        geo[i, 1] = sn
        geo[i, 2] = 1.0 / sx2
        geo[i, 3] = 1.0 / sy2
        geo[i, 4] = 1.0 / (1.0 + math.exp(-opacity_logit[i]))
        rx = 3.0 * math.sqrt(cs * cs * sx2 + sn * sn * sy2)
        ry = 3.0 * math.sqrt(sn * sn * sx2 + cs * cs * sy2)
        x0 = max(math.ceil(mu[i, 0] - rx), 0)
        x1 = min(math.floor(mu[i, 0] + rx), w - 1)
        y0 = max(math.ceil(mu[i, 1] - ry), 0)
        y1 = min(math.floor(mu[i, 1] + ry), h - 1)
        if x0 <= x1 and y0 <= y1:
            box[i, 0] = x0
            box[i, 1] = x1
            box[i, 2] = y0
            box[i, 3] = y1
    return geo, box


@njit(cache=True)
def _bin(box, h, w):
    n = box.shape[0]
    tx_n = (w + TILE - 1) // TILE
    ty_n = (h + TILE - 1) // TILE
    counts = np.zeros(tx_n * ty_n + 1, np.int64)
    for i in range(n):
        if box[i, 0] < 0:
            continue
        for ty in range(box[i, 2] // TILE, box[i, 3] // TILE + 1):
            for tx in range(box[i, 0] // TILE, box[i, 1] // TILE + 1):
                counts[ty * tx_n + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], np.int64)
    for i in range(n):
        if box[i, 0] < 0:
            continue
        for ty in range(box[i, 2] // TILE, box[i, 3] // TILE + 1):
            for tx in range(box[i, 0] // TILE, box[i, 1] // TILE + 1):
                t = ty * tx_n + tx
                entries[fill[t]] = i
                fill[t] += 1
    return offsets, entries


@njit(cache=True)
def _gauss(mu, geo, i, px, py):
    dx = px - mu[i, 0]
    dy = py - mu[i, 1]
    u = geo[i, 0] * dx + geo[i, 1] * dy
    v = -geo[i, 1] * dx + geo[i, 0] * dy
    return math.exp(-0.5 * (u * u * geo[i, 2] + v * v * geo[i, 3]))


@njit(cache=True, parallel=True)
def _forward(mu, geo, box, attrs, offsets, entries, h, w, mode):
    c_n = attrs.shape[1]
    tx_n = (w + TILE - 1) // TILE
    ty_n = (h + TILE - 1) // TILE
    image = np.zeros((h, w, c_n))
    accum = np.zeros((h, w, 1))
    ncontrib = np.zeros((h, w), np.int32)
    for t in prange(tx_n * ty_n):
        ty = t // tx_n
        tx = t % tx_n
        for py in range(ty * TILE, min((ty + 1) * TILE, h)):
            for px in range(tx * TILE, min((tx + 1) * TILE, w)):
                trans = 1.0
                acc = 0.0
                cnt = 0
                for e in range(offsets[t], offsets[t + 1]):
                    i = entries[e]
                    if px < box[i, 0] or px > box[i, 1] or py < box[i, 2] or py > box[i, 3]:
                        continue
                    a = geo[i, 4] * _gauss(mu, geo, i, px, py)
                    wgt = a * trans if mode == 0 else a
                    for c in range(c_n):
                        image[py, px, c] += attrs[i, c] * wgt
                    acc += wgt
                    cnt += 1
                    if mode == 0:
                        trans *= 1.0 - a
                        if trans < T_MIN:
                            break
                accum[py, px, 0] = acc
                ncontrib[py, px] = cnt
    return image, accum, ncontrib


@njit(cache=True, parallel=True)
def _weights(mu, geo, box, offsets, entries, h, w, mode, indptr):
    tx_n = (w + TILE - 1) // TILE
    ty_n = (h + TILE - 1) // TILE
    cols = np.empty(indptr[-1], np.int64)
    vals = np.empty(indptr[-1])
    for t in prange(tx_n * ty_n):
        ty = t // tx_n
        tx = t % tx_n
        for py in range(ty * TILE, min((ty + 1) * TILE, h)):
            for px in range(tx * TILE, min((tx + 1) * TILE, w)):
                k = indptr[py * w + px]
                trans = 1.0
                for e in range(offsets[t], offsets[t + 1]):
                    i = entries[e]
                    if px < box[i, 0] or px > box[i, 1] or py < box[i, 2] or py > box[i, 3]:
                        continue
                    a = geo[i, 4] * _gauss(mu, geo, i, px, py)
                    cols[k] = i
                    vals[k] = a * trans if mode == 0 else a
                    k += 1
                    if mode == 0:
                        trans *= 1.0 - a
                        if trans < T_MIN:
                            break
    return cols, vals


@njit(cache=True, parallel=True)
def _backward(mu, geo, box, attrs, offsets, entries, h, w, mode, upstream):
    c_n = attrs.shape[1]
    tx_n = (w + TILE - 1) // TILE
    ty_n = (h + TILE - 1) // TILE
    eg = np.zeros((entries.shape[0], _NG + c_n))
    for t in prange(tx_n * ty_n):
        start = offsets[t]
        m = offsets[t + 1] - start
        if m == 0:
            continue
        slot = np.empty(m, np.int64)
        a_s = np.empty(m)
        g_s = np.empty(m)
        t_s = np.empty(m)
        behind = np.empty(c_n)
        ty = t // tx_n
        tx = t % tx_n
        for py in range(ty * TILE, min((ty + 1) * TILE, h)):
            for px in range(tx * TILE, min((tx + 1) * TILE, w)):
                # front-to-back replay of the forward chain
                trans = 1.0
                k = 0
                for e in range(start, start + m):
                    i = entries[e]
                    if px < box[i, 0] or px > box[i, 1] or py < box[i, 2] or py > box[i, 3]:
                        continue
                    gv = _gauss(mu, geo, i, px, py)
                    a = geo[i, 4] * gv
                    slot[k] = e
                    a_s[k] = a
                    g_s[k] = gv
                    t_s[k] = trans
                    k += 1
                    if mode == 0:
                        trans *= 1.0 - a
                        if trans < T_MIN:
                            break
                for c in range(c_n):
                    behind[c] = 0.0
                for kk in range(k - 1, -1, -1):
                    e = slot[kk]
                    i = entries[e]
                    a = a_s[kk]
                    gc = 0.0
                    gb = 0.0
                    for c in range(c_n):
                        gc += upstream[py, px, c] * attrs[i, c]
                        gb += upstream[py, px, c] * behind[c]
                    if mode == 0:
                        wgt = a * t_s[kk]
                        d_a = t_s[kk] * (gc - gb)
                        for c in range(c_n):
                            behind[c] = a * attrs[i, c] + (1.0 - a) * behind[c]
                    else:
                        wgt = a
                        d_a = gc
                    for c in range(c_n):
                        eg[e, _NG + c] += upstream[py, px, c] * wgt
                    alpha = geo[i, 4]
                    gv = g_s[kk]
                    eg[e, 5] += d_a * gv * alpha * (1.0 - alpha)
                    d_pow = d_a * alpha * gv
                    dx = px - mu[i, 0]
                    dy = py - mu[i, 1]
                    cs = geo[i, 0]
                    sn = geo[i, 1]
                    u = cs * dx + sn * dy
                    v = -sn * dx + cs * dy
                    du = -u * geo[i, 2]
                    dv = -v * geo[i, 3]
                    eg[e, 0] += d_pow * (-du * cs + dv * sn)
                    eg[e, 1] += d_pow * (-du * sn - dv * cs)
                    eg[e, 2] += d_pow * u * u * geo[i, 2]
                    eg[e, 3] += d_pow * v * v * geo[i, 3]
                    eg[e, 4] += d_pow * u * v * (geo[i, 3] - geo[i, 2])
    return eg


@njit(cache=True)
def _reduce(eg, entries, n):
    out = np.zeros((n, eg.shape[1]))
    for e in range(entries.shape[0]):
        i = entries[e]
        for j in range(eg.shape[1]):
            out[i, j] += eg[e, j]
    return out


def _as_inputs(mu, log_scale, theta, opacity_logit, attrs):
    mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 2)
    n = len(mu)
    log_scale = np.ascontiguousarray(log_scale, dtype=np.float64).reshape(n, 2)
    theta = np.ascontiguousarray(theta, dtype=np.float64).reshape(n)
    opacity_logit = np.ascontiguousarray(opacity_logit, dtype=np.float64).reshape(n)
    attrs = np.ascontiguousarray(attrs, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[0] != n:
        raise ValueError(f"attrs must be ({n}, C), got {attrs.shape}")
    return mu, log_scale, theta, opacity_logit, attrs


def _mode(mode: str) -> int:
    try:
        return _MODES[mode]
    except KeyError:
        raise ValueError(f"mode must be 'alpha' or 'sum', got {mode!r}") from None


def render(mu, log_scale, theta, opacity_logit, attrs, dims, mode=ALPHA) -> RenderOutput:
    """Splat per-primitive attribute rows onto an ``(H, W)`` grid."""
    h, w = (int(d) for d in dims)
    if h < 1 or w < 1:
        raise ValueError(f"render dims must be >= 1x1, got {dims}")
    mu, log_scale, theta, opacity_logit, attrs = _as_inputs(mu, log_scale, theta, opacity_logit, attrs)
    geo, box = _prepare(mu, log_scale, theta, opacity_logit, h, w)
    offsets, entries = _bin(box, h, w)
    image, accum, ncontrib = _forward(mu, geo, box, attrs, offsets, entries, h, w, _mode(mode))
    return RenderOutput(image, accum, ncontrib)


def render_backward(mu, log_scale, theta, opacity_logit, attrs, dims, upstream, mode=ALPHA) -> RenderGrads:
    """Gradients of ``sum(upstream * render(...).image)`` w.r.t. every input array."""
    h, w = (int(d) for d in dims)
    mu, log_scale, theta, opacity_logit, attrs = _as_inputs(mu, log_scale, theta, opacity_logit, attrs)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (h, w, attrs.shape[1]):
        raise ValueError(f"upstream shape {upstream.shape} != {(h, w, attrs.shape[1])}")
    geo, box = _prepare(mu, log_scale, theta, opacity_logit, h, w)
    offsets, entries = _bin(box, h, w)
    eg = _backward(mu, geo, box, attrs, offsets, entries, h, w, _mode(mode), upstream)
    g = _reduce(eg, entries, len(mu))
    return RenderGrads(mu=g[:, 0:2].copy(), log_scale=g[:, 2:4].copy(), theta=g[:, 4].copy(),
                       attrs=g[:, _NG:].copy(), opacity_logit=g[:, 5].copy())


def composite_weights(mu, log_scale, theta, opacity_logit, dims, mode=ALPHA) -> sparse.csr_matrix:
    """Per-pixel blending weights as a sparse ``(H*W, N)`` matrix.

    Row ``y*W + x`` holds the weight each primitive contributes to that pixel,
    so ``M @ attrs`` equals ``render(..., attrs).image`` flattened.  With fixed
    geometry this turns rendering into a sparse product whose transpose is
    the attribute gradient.
    """
    h, w = (int(d) for d in dims)
    mu, log_scale, theta, opacity_logit, _ = _as_inputs(mu, log_scale, theta, opacity_logit,
                                                        np.zeros((len(np.reshape(mu, (-1, 2))), 0)))
    geo, box = _prepare(mu, log_scale, theta, opacity_logit, h, w)
    offsets, entries = _bin(box, h, w)
    _, _, ncontrib = _forward(mu, geo, box, np.zeros((len(mu), 0)), offsets, entries, h, w, _mode(mode))
    indptr = np.zeros(h * w + 1, np.int64)
    np.cumsum(ncontrib.ravel(), out=indptr[1:])
    cols, vals = _weights(mu, geo, box, offsets, entries, h, w, _mode(mode), indptr)
    return sparse.csr_matrix((vals, cols, indptr), shape=(h * w, len(mu)))


def render_naive(mu, log_scale, theta, opacity_logit, attrs, dims, mode=ALPHA) -> RenderOutput:
    """Reference renderer: every pixel visits every primitive, no tiling.

    Applies the same 3-sigma box truncation and early exit as :func:`render`.
    """
    from .gaussians import extent_3sigma, gaussian_response, sigmoid

    h, w = dims
    mu, log_scale, theta, opacity_logit, attrs = _as_inputs(mu, log_scale, theta, opacity_logit, attrs)
    c_n = attrs.shape[1]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs, ys], axis=-1)
    image = np.zeros((h, w, c_n))
    accum = np.zeros((h, w))
    trans = np.ones((h, w))
    alive = np.ones((h, w), bool)
    count = np.zeros((h, w), np.int32)
    alphas = sigmoid(opacity_logit)
    for i in range(len(mu)):
        scales = np.exp(log_scale[i])
        bx = extent_3sigma(mu[i], theta[i], scales, (h, w))
        if bx is None:
            continue
        inside = (xs >= bx[0]) & (xs <= bx[1]) & (ys >= bx[2]) & (ys <= bx[3]) & alive
        a = np.where(inside, alphas[i] * gaussian_response(mu[i], theta[i], scales, pts), 0.0)
        wgt = a * trans if mode == ALPHA else a
        image += wgt[..., None] * attrs[i]
        accum += wgt
        count += inside
        if mode == ALPHA:
            trans = np.where(inside, trans * (1.0 - a), trans)
            alive &= trans >= T_MIN
    return RenderOutput(image, accum[..., None], count)


def set_threads(n: int | None) -> None:
    """Cap numba's worker pool; ``None`` keeps the hardware default."""
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
