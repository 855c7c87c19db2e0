"""Stage 2: zero-shot enhancement through splatted dictionary weights.

Each frozen Gaussian carries a logit vector over the K+1 dictionary atoms.
Softmaxed logits are splatted through the frozen geometry into a per-pixel
weight map, normalized by accumulated opacity, mixed into per-pixel curve
coefficients and applied to the input.  The per-channel ratio between the
curved and original intensities is the gain map.  Logits and a small colour
bias are optimized per image against six unsupervised losses.
"""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import raster
from .dictionary import Dictionary, apply_curve, curve_backward
from .gaussians import GaussianSet, merged_full_resolution
from .image import (LUMA_WEIGHTS, as_image, gaussian_blur, grad_xy, grad_xy_adjoint, luminance,
                    patch_index, sample_bilinear, save_image)
from .optim import CosineSchedule, OptimState

log = logging.getLogger(__name__)

COVER_MIN = 1e-4
GAIN_EPS = 1e-4
INIT_TEMPERATURE = 2.0
TERMS = ("target", "spa", "exp", "sparse", "tv", "cont")


class CompatibilityError(ValueError):
    """Model and dictionary (or image) cannot be used together."""


@dataclass
class EnhanceConfig:
    iterations: int = 2000
    lr: float = 0.001
    lr_min_fraction: float = 0.05
    e_target: float = 0.6
    blur_sigma: float | None = None      # None -> 5% of the shorter side
    eps: float = 1e-3
    weights: tuple[float, ...] = (0.01, 1.0, 6.0, 0.01, 3.0, 0.4)
    patch: int = 16
    bias_bound: float = 0.1
    seed: int = 0

    @classmethod
    def paper(cls, **kw) -> "EnhanceConfig":
        kw.setdefault("iterations", 50_000)
        return cls(**kw)

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_min_fraction <= 1:
            raise ValueError("lr_min_fraction must lie in (0, 1]")
        if not 0.0 < self.e_target < 1.0:
            raise ValueError("e_target must lie in (0, 1)")
        if len(self.weights) != 6 or min(self.weights) < 0:
            raise ValueError("weights must be six non-negative numbers")
        if self.blur_sigma is not None and not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")
        if not self.eps > 0 or self.patch < 1 or self.bias_bound < 0:
            raise ValueError("eps must be positive, patch >= 1, bias_bound >= 0")


@dataclass
class GainField:
    gamma: np.ndarray         # (H, W, P) per-pixel curve coefficients
    eta: np.ndarray           # (H, W, 3) multiplicative gain
    bias: np.ndarray          # (3,)
    enhanced: np.ndarray      # (H, W, 3) curve output before the gain ratio


@dataclass
class Scene:
    """Frozen geometry of every level, in full-resolution pixel coordinates."""

    mu: np.ndarray
    log_scale: np.ndarray
    theta: np.ndarray
    opacity_logit: np.ndarray
    dims: tuple[int, int]
    level_sizes: list[int]
    blend: sparse.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        # geometry never changes during enhancement, so the splat is a fixed linear map
        self.blend = raster.composite_weights(self.mu, self.log_scale, self.theta, self.opacity_logit, self.dims)
        self.accum = np.asarray(self.blend.sum(axis=1)).reshape(self.dims + (1,))

    @classmethod
    def from_model(cls, gset: GaussianSet) -> "Scene":
        mu, ls, th, op = merged_full_resolution(gset)
        return cls(mu, ls, th, op, gset.dims, [lv.count for lv in gset.levels])

    def splat(self, attrs: np.ndarray) -> np.ndarray:
        return (self.blend @ attrs).reshape(self.dims + (attrs.shape[1],))

    def splat_adjoint(self, grad: np.ndarray) -> np.ndarray:
        return self.blend.T @ grad.reshape(-1, grad.shape[2])

    @property
    def count(self) -> int:
        return len(self.mu)

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return np.split(arr, np.cumsum(self.level_sizes)[:-1])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_map(img) -> np.ndarray:
    """Inverted brightness: 1 where the input is black, 0 where white."""
    return 1.0 - luminance(as_image(img))


def init_logits(scene: Scene, img, dictionary: Dictionary) -> np.ndarray:
    """Start dark primitives toward the active atoms, bright ones toward identity."""
    k = dictionary.k
    m = sample_bilinear(attention_map(img), scene.mu)[:, 0]
    logits = np.empty((scene.count, k + 1))
    logits[:, 0] = (1.0 - m) * INIT_TEMPERATURE
    logits[:, 1:] = (m * INIT_TEMPERATURE / k)[:, None]
    return logits


def splat_weights(scene: Scene, weights: np.ndarray):
    """Render per-primitive atom weights, normalized to sum to one per pixel.

    Returns ``(omega, accum, covered)``; pixels with accumulated opacity below
    ``COVER_MIN`` get the identity atom.
    """
    if weights.shape[0] != scene.count:
        raise ValueError(f"weights have {weights.shape[0]} rows for {scene.count} primitives")
    accum = scene.accum
    covered = accum[:, :, 0] >= COVER_MIN
    omega = scene.splat(weights) / np.maximum(accum, COVER_MIN)
    omega[~covered] = 0.0
    omega[~covered, 0] = 1.0
    return omega, accum, covered


def synthesize_gain(omega: np.ndarray, dictionary: Dictionary, img, bias=None) -> GainField:
    """Mix atoms per pixel, run the curve, and take the realized per-channel ratio."""
    if omega.shape[2] != dictionary.k + 1:
        raise CompatibilityError(f"weight map has {omega.shape[2]} channels, dictionary has {dictionary.k + 1} atoms")
    img = as_image(img)
    gamma = omega @ dictionary.atoms
    enhanced = apply_curve(img, gamma[:, :, None, :])
    eta = (enhanced + GAIN_EPS) / (img + GAIN_EPS)
    return GainField(gamma, eta, np.zeros(3) if bias is None else np.asarray(bias, float), enhanced)


def compose_output(img, gain: GainField) -> np.ndarray:
    return np.clip(as_image(img) * gain.eta + gain.bias, 0.0, 1.0)


@dataclass
class LossContext:
    """Per-image constants for the hybrid loss."""

    img: np.ndarray
    target: np.ndarray          # locally adaptive target image
    grad_low: tuple[np.ndarray, np.ndarray]
    contrast_low: float
    patch_ids: np.ndarray
    patch_counts: np.ndarray
    cfg: EnhanceConfig

    @classmethod
    def build(cls, img, cfg: EnhanceConfig) -> "LossContext":
        img = as_image(img)
        h, w = img.shape[:2]
        sigma = cfg.blur_sigma if cfg.blur_sigma is not None else 0.05 * min(h, w)
        lum = luminance(img)
        blurred = gaussian_blur(lum, sigma)
        target = np.clip(img * cfg.e_target / (blurred + cfg.eps), 0.0, 1.0)
        ids, counts, _ = patch_index(h, w, cfg.patch)
        return cls(img, target, grad_xy(img), float(_contrast(lum)[0].mean()), ids.ravel(), counts, cfg)


def _contrast(lum):
    gx, gy = grad_xy(lum)
    mag = np.sqrt(gx * gx + gy * gy)
    return mag, gx, gy


def hybrid_loss(ctx: LossContext, out: np.ndarray, eta: np.ndarray, weights: np.ndarray):
    """Weighted sum of the six losses plus gradients w.r.t. ``out``, ``eta``, ``weights``.

    Returns ``(total, terms, d_out, d_eta, d_weights)`` where ``terms`` holds
    the unweighted values.
    """
    cfg = ctx.cfg
    lam = cfg.weights
    n_out = out.size
    terms = {}
    d_out = np.zeros_like(out)

    diff = out - ctx.target
    terms["target"] = float(np.abs(diff).mean())
    d_out += lam[0] * np.sign(diff) / n_out

    gx, gy = grad_xy(out)
    dx, dy = gx - ctx.grad_low[0], gy - ctx.grad_low[1]
    terms["spa"] = float(np.abs(dx).mean() + np.abs(dy).mean())
    d_out += lam[1] * grad_xy_adjoint(np.sign(dx) / n_out, np.sign(dy) / n_out)

    lum = luminance(out)
    flat = lum.ravel()
    z = len(ctx.patch_counts)
    means = np.bincount(ctx.patch_ids, weights=flat, minlength=z) / ctx.patch_counts
    dev = means - cfg.e_target
    terms["exp"] = float(np.mean(dev * dev))
    d_lum = (lam[2] * 2.0 * dev / z / ctx.patch_counts)[ctx.patch_ids].reshape(lum.shape)

    terms["sparse"] = float(weights[:, 1:].sum(axis=1).mean())
    d_weights = np.zeros_like(weights)
    d_weights[:, 1:] = lam[3] / len(weights)

    ex, ey = grad_xy(eta)
    terms["tv"] = float(np.abs(ex).mean() + np.abs(ey).mean())
    d_eta = lam[4] * grad_xy_adjoint(np.sign(ex) / eta.size, np.sign(ey) / eta.size)

    mag, lgx, lgy = _contrast(lum)
    gap = ctx.contrast_low - float(mag.mean())
    terms["cont"] = max(gap, 0.0)
    if gap > 0:
        safe = np.where(mag > 0, mag, 1.0)
        d_mag = -lam[5] / mag.size
        d_lum += grad_xy_adjoint(np.where(mag > 0, d_mag * lgx / safe, 0.0),
                                 np.where(mag > 0, d_mag * lgy / safe, 0.0))

    d_out += d_lum * LUMA_WEIGHTS
    total = float(sum(l * terms[t] for l, t in zip(lam, TERMS)))
    return total, terms, d_out, d_eta, d_weights


@dataclass
class Evaluation:
    loss: float
    terms: dict
    output: np.ndarray
    gain: GainField
    omega: np.ndarray
    accum: np.ndarray
    grad_logits: np.ndarray | None = None
    grad_bias: np.ndarray | None = None


def evaluate_objective(scene: Scene, dictionary: Dictionary, ctx: LossContext, logits: np.ndarray,
                       bias: np.ndarray, want_grad: bool = True) -> Evaluation:
    """Forward pass through splatting, gain, composition and loss; optional full backward."""
    img = ctx.img
    weights = softmax(logits)
    omega, accum, covered = splat_weights(scene, weights)
    gain = synthesize_gain(omega, dictionary, img, bias)
    pre = img * gain.eta + gain.bias
    out = np.clip(pre, 0.0, 1.0)
    total, terms, d_out, d_eta, d_w = hybrid_loss(ctx, out, gain.eta, weights)
    ev = Evaluation(total, terms, out, gain, omega, accum)
    if not want_grad:
        return ev
    d_pre = d_out * ((pre > 0.0) & (pre < 1.0))
    ev.grad_bias = d_pre.sum(axis=(0, 1))
    d_eta = d_eta + d_pre * img
    d_enh = d_eta / (img + GAIN_EPS)
    _, d_gamma_c = curve_backward(img, gain.gamma[:, :, None, :], d_enh)
    d_gamma = d_gamma_c.sum(axis=2)
    d_omega = d_gamma @ dictionary.atoms.T
    d_raw = np.where(covered[:, :, None], d_omega / np.maximum(accum, COVER_MIN), 0.0)
    d_w = d_w + scene.splat_adjoint(d_raw)
    ev.grad_logits = weights * (d_w - (d_w * weights).sum(axis=1, keepdims=True))
    return ev


@dataclass
class EnhanceResult:
    output: np.ndarray
    gain: GainField
    omega: np.ndarray
    logits: list[np.ndarray]          # per level
    trace: list[dict] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def check_compatible(model: GaussianSet, dictionary: Dictionary, img=None) -> None:
    if not model.frozen:
        raise CompatibilityError("model geometry must be frozen before enhancement")
    width = model.logit_width
    if width is not None and width != dictionary.k + 1:
        raise CompatibilityError(
            f"model logits have {width} atoms but the dictionary has {dictionary.k + 1} (K={dictionary.k})")
    if img is not None and as_image(img).shape[:2] != model.dims:
        raise CompatibilityError(f"image is {as_image(img).shape[:2]} but the model was fit at {model.dims}")


def enhance(img, model: GaussianSet, dictionary: Dictionary, cfg: EnhanceConfig | None = None,
            trace_every: int = 1) -> EnhanceResult:
    """Optimize per-Gaussian atom logits and the bias for one image."""
    cfg = cfg or EnhanceConfig()
    cfg.validate()
    img = as_image(img)
    if img.shape[2] != 3:
        raise ValueError("enhance expects a 3-channel image")
    check_compatible(model, dictionary, img)
    scene = Scene.from_model(model)
    ctx = LossContext.build(img, cfg)
    logits = init_logits(scene, img, dictionary)
    bias = np.zeros(3)
    nl = logits.size
    opt = OptimState(nl + 3, lr=cfg.lr, schedule=CosineSchedule(cfg.iterations, cfg.lr_min_fraction))
    params = np.concatenate([logits.ravel(), bias])
    trace = []
    for it in range(cfg.iterations):
        ev = evaluate_objective(scene, dictionary, ctx, logits, bias)
        if it % trace_every == 0:
            trace.append({"iteration": it, "loss": ev.loss, **ev.terms})
        params = opt.update(params, np.concatenate([ev.grad_logits.ravel(), ev.grad_bias]))
        params[nl:] = np.clip(params[nl:], -cfg.bias_bound, cfg.bias_bound)
        logits = params[:nl].reshape(logits.shape)
        bias = params[nl:]
        if it % 500 == 0:
            log.debug("iter %d loss %.5f", it, ev.loss)
    final = evaluate_objective(scene, dictionary, ctx, logits, bias, want_grad=False)
    trace.append({"iteration": cfg.iterations, "loss": final.loss, **final.terms})
    lum_in = float(luminance(img).mean())
    lum_out = float(luminance(final.output).mean())
    diagnostics = {"final_loss": final.loss, "mean_luminance_in": lum_in, "mean_luminance_out": lum_out,
                   "bias": bias.tolist()}
    return EnhanceResult(final.output, final.gain, final.omega, scene.split(logits), trace, diagnostics)


# --- dumps ----------------------------------------------------------------


def save_gain_png(gain: GainField, path) -> None:
    """Min-max normalized channel-mean gain, for viewing."""
    eta = gain.eta.mean(axis=2)
    lo, hi = float(eta.min()), float(eta.max())
    save_image((eta - lo) / (hi - lo) if hi > lo else np.zeros_like(eta), path)


def save_gain_raw(gain: GainField, path) -> None:
    """Raw gain as ``H, W, C`` u32 header followed by little-endian f32 values."""
    h, w, c = gain.eta.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(gain.eta, dtype="<f4").tobytes())


def save_omega_pngs(omega: np.ndarray, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k in range(omega.shape[2]):
        p = os.path.join(out_dir, f"omega_{k:03d}.png")
        save_image(omega[:, :, k], p)
        paths.append(p)
    return paths


def write_trace_csv(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["iteration", "loss", *TERMS])
        wr.writeheader()
        for row in trace:
            wr.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
