"""Stage 1: fit a coarse-to-fine residual pyramid of Gaussians to an image."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .gaussians import LOG_SCALE_FLOOR, GaussianLevel, GaussianSet
from .image import as_image, resize_bilinear, sample_bilinear
from .metrics import SSIM_WIN, psnr, ssim_with_grad
from .optim import CosineSchedule, OptimState, constant_schedule
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class ReconConfig:
    num_primitives: int = 2000
    scales: int = 2
    iterations: int = 3000          # per level
    lr: float = 0.01
    ssim_weight: float = 0.7
    split: tuple[float, ...] | None = None   # coarse -> fine; None picks a default
    lr_min_fraction: float | None = 0.1      # cosine floor; None keeps lr constant
    mode: str = raster.ALPHA
    seed: int = 0

    @classmethod
    def paper(cls, **kw) -> "ReconConfig":
        kw.setdefault("num_primitives", 70_000)
        kw.setdefault("iterations", 20_000)
        return cls(**kw)

    def level_split(self) -> tuple[float, ...]:
        if self.split is not None:
            return tuple(self.split)
        if self.scales == 2:
            return (0.25, 0.75)
        areas = [4.0 ** s for s in range(self.scales)]
        return tuple(a / sum(areas) for a in areas)

    def validate(self) -> None:
        if self.num_primitives < 1:
            raise ValueError("num_primitives must be >= 1")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must lie in [0, 1]")
        split = self.level_split()
        if len(split) != self.scales:
            raise ValueError(f"split has {len(split)} entries for {self.scales} scales")
        if abs(sum(split) - 1.0) > 1e-9 or min(split) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")
        if min(self.level_counts()) < 1:
            raise ValueError("every level needs at least one primitive")
        if self.lr_min_fraction is not None and not 0 < self.lr_min_fraction <= 1:
            raise ValueError("lr_min_fraction must lie in (0, 1]")
        raster._mode(self.mode)

    def level_counts(self) -> list[int]:
        split = self.level_split()
        counts = [int(math.floor(self.num_primitives * f)) for f in split[:-1]]
        counts.append(self.num_primitives - sum(counts))
        return counts


def pyramid_dims(h: int, w: int, scales: int) -> list[tuple[int, int]]:
    """Level resolutions, coarse first; the last level is full resolution."""
    return [(max(1, h >> (scales - 1 - s)), max(1, w >> (scales - 1 - s))) for s in range(scales)]


def build_pyramid_targets(img, scales: int, partial_renders=()) -> list[np.ndarray]:
    """Targets for levels ``0 .. len(partial_renders)``.

    ``partial_renders[t]`` is the raw render of level ``t`` at that level's
    resolution.  Level ``s > 0`` fits the downsampled image minus every
    coarser render upsampled straight to level ``s``; these residuals are
    signed and left unclamped.
    """
    img = as_image(img)
    dims = pyramid_dims(img.shape[0], img.shape[1], scales)
    targets = []
    for s in range(min(len(partial_renders) + 1, scales)):
        t = resize_bilinear(img, *dims[s])
        for r in partial_renders[:s]:
            t = t - resize_bilinear(r, *dims[s])
        targets.append(t)
    return targets


def photometric_loss(render: np.ndarray, target: np.ndarray, lam: float):
    """``(1 - lam) * mean|R - T| + lam * (1 - SSIM(R, T))`` and its gradient.

    SSIM is the per-channel mean; it is dropped on levels smaller than the
    SSIM window.
    """
    if render.shape != target.shape:
        raise ValueError(f"render {render.shape} and target {target.shape} differ")
    diff = render - target
    loss = (1.0 - lam) * float(np.abs(diff).mean())
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    if lam > 0 and min(render.shape[:2]) >= SSIM_WIN:
        s, ds = ssim_with_grad(render, target)
        loss += lam * (1.0 - s)
        grad = grad - lam * ds
    return loss, grad


def init_gaussians(target: np.ndarray, n: int, seed: int = 0, level: int = 0) -> GaussianLevel:
    """Jittered-grid initialization sampled from ``target``."""
    if n < 1:
        raise ValueError("need at least one primitive")
    target = as_image(target)
    h, w = target.shape[:2]
    rng = stream(seed, f"init-level-{level}")
    nx = max(1, round(math.sqrt(n * w / h)))
    ny = -(-n // nx)
    cw, ch = w / nx, h / ny
    cells = np.sort(rng.permutation(nx * ny)[:n])
    cx = (cells % nx + 0.5) * cw - 0.5
    cy = (cells // nx + 0.5) * ch - 0.5
    jitter = rng.uniform(-0.25, 0.25, size=(n, 2)) * np.array([cw, ch])
    mu = np.stack([cx, cy], axis=1) + jitter
    spacing = math.sqrt(cw * ch)
    log_scale = np.full((n, 2), max(math.log(0.5 * spacing), LOG_SCALE_FLOOR))
    color = sample_bilinear(target, mu)
    return GaussianLevel(h, w, mu, log_scale, np.zeros(n), color, np.zeros(n))


_SLICES = ("mu", "log_scale", "theta", "color", "opacity_logit")


def _pack(lv: GaussianLevel) -> np.ndarray:
    return np.concatenate([getattr(lv, k).astype(np.float64).ravel() for k in _SLICES])


def _unpack(vec: np.ndarray, n: int, c: int) -> dict:
    sizes = {"mu": 2 * n, "log_scale": 2 * n, "theta": n, "color": c * n, "opacity_logit": n}
    shapes = {"mu": (n, 2), "log_scale": (n, 2), "theta": (n,), "color": (n, c), "opacity_logit": (n,)}
    out, pos = {}, 0
    for k in _SLICES:
        out[k] = vec[pos:pos + sizes[k]].reshape(shapes[k])
        pos += sizes[k]
    return out


def render_level(lv: GaussianLevel, attrs=None, mode=raster.ALPHA) -> raster.RenderOutput:
    attrs = lv.color if attrs is None else attrs
    return raster.render(lv.mu, lv.log_scale, lv.theta, lv.opacity_logit, attrs, lv.dims, mode)


def cascade(gset: GaussianSet, mode=raster.ALPHA, clamp: bool = True) -> np.ndarray:
    """Full-resolution reconstruction: sum of every level render upsampled to full size."""
    h, w = gset.dims
    out = sum(resize_bilinear(render_level(lv, mode=mode).image, h, w) for lv in gset.levels)
    return np.clip(out, 0.0, 1.0) if clamp else out


@dataclass
class FitResult:
    model: GaussianSet
    psnr: float
    initial_psnr: float
    reconstruction: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)   # per-level loss traces


def _fit_level(lv: GaussianLevel, target: np.ndarray, cfg: ReconConfig, level: int, writer=None) -> np.ndarray:
    n, c = lv.count, lv.color.shape[1]
    params = _pack(lv)
    floor_mask = np.zeros(params.size, bool)
    floor_mask[2 * n:4 * n] = True
    schedule = (CosineSchedule(cfg.iterations, cfg.lr_min_fraction)
                if cfg.lr_min_fraction is not None else constant_schedule)
    opt = OptimState(params.size, lr=cfg.lr, schedule=schedule)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        p = _unpack(params, n, c)
        out = raster.render(p["mu"], p["log_scale"], p["theta"], p["opacity_logit"], p["color"], lv.dims, cfg.mode)
        loss, dimg = photometric_loss(out.image, target, cfg.ssim_weight)
        g = raster.render_backward(p["mu"], p["log_scale"], p["theta"], p["opacity_logit"], p["color"],
                                   lv.dims, dimg, cfg.mode)
        grad = np.concatenate([g.mu.ravel(), g.log_scale.ravel(), g.theta, g.attrs.ravel(), g.opacity_logit])
        params = opt.update(params, grad)
        params[floor_mask] = np.maximum(params[floor_mask], LOG_SCALE_FLOOR)
        losses[it] = loss
        if writer is not None:
            writer.writerow([level, it, f"{loss:.8g}", f"{psnr_signed(out.image, target):.6g}"])
        if it % 500 == 0:
            log.debug("level %d iter %d loss %.5f", level, it, loss)
    lv.set_geometry(**_unpack(params, n, c))
    return losses


def psnr_signed(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR without the [0, 1] precondition, for residual levels."""
    mse = float(np.mean((a - b) ** 2))
    return 99.0 if mse < 1e-10 else min(99.0, 10.0 * math.log10(1.0 / mse))


def fit(img, cfg: ReconConfig | None = None, log_csv=None) -> FitResult:
    """Optimize every level in turn (coarse first) and return the frozen set."""
    cfg = cfg or ReconConfig()
    cfg.validate()
    img = as_image(img)
    if img.shape[2] != 3:
        raise ValueError("fit expects a 3-channel image")
    h, w = img.shape[:2]
    counts = cfg.level_counts()
    levels: list[GaussianLevel] = []
    renders: list[np.ndarray] = []
    history = []
    init_renders = []
    fh = open(log_csv, "w", newline="") if log_csv else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["level", "iteration", "loss", "psnr"])
    try:
        for s in range(cfg.scales):
            target = build_pyramid_targets(img, cfg.scales, renders)[s]
            lv = init_gaussians(target, counts[s], cfg.seed, level=s)
            init_renders.append(render_level(lv, mode=cfg.mode).image)
            history.append(_fit_level(lv, target, cfg, s, writer))
            lv.freeze()
            levels.append(lv)
            renders.append(render_level(lv, mode=cfg.mode).image)
    finally:
        if fh:
            fh.close()
    gset = GaussianSet(levels)
    recon = np.clip(sum(resize_bilinear(r, h, w) for r in renders), 0.0, 1.0)
    init_recon = np.clip(sum(resize_bilinear(r, h, w) for r in init_renders), 0.0, 1.0)
    return FitResult(gset, psnr(recon, img), psnr(init_recon, img), recon, history)
