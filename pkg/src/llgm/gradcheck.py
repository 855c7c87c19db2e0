"""Central finite-difference checks of every analytic gradient in the pipeline.

Scenes are drawn so that the checks probe smooth regions of the objective:
no 3-sigma box edge sits near a pixel centre (the cull makes the render jump
there), transmittance never reaches the early-exit threshold, and the
enhanced output stays inside (0, 1) so the final clamp is inactive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .dictionary import Dictionary
from .enhance import EnhanceConfig, LossContext, Scene, evaluate_objective, init_logits
from .gaussians import GaussianSet
from .reconstruct import init_gaussians, pyramid_dims
from .rng import stream

REL_TOL = 1e-3
ABS_FLOOR = 1e-5
EDGE_MARGIN = 0.05
RASTER_CLASSES = ("mu", "log_scale", "theta", "attr", "opacity_logit")
CHAIN_CLASSES = ("logits", "bias")


def rel_error(analytic, numeric) -> np.ndarray:
    """Elementwise error, relative to the larger magnitude but never below ``ABS_FLOOR``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def _edges_clear(mu, log_scale, theta) -> bool:
    sx2, sy2 = np.exp(2 * log_scale[0]), np.exp(2 * log_scale[1])
    c, s = math.cos(theta), math.sin(theta)
    rx = 3.0 * math.sqrt(c * c * sx2 + s * s * sy2)
    ry = 3.0 * math.sqrt(s * s * sx2 + c * c * sy2)
    edges = np.array([mu[0] - rx, mu[0] + rx, mu[1] - ry, mu[1] + ry])
    return bool(np.all(np.abs(edges - np.round(edges)) > EDGE_MARGIN))


@dataclass
class RasterScene:
    mu: np.ndarray
    log_scale: np.ndarray
    theta: np.ndarray
    opacity_logit: np.ndarray
    attrs: np.ndarray
    dims: tuple[int, int]

    def args(self):
        return self.mu, self.log_scale, self.theta, self.opacity_logit, self.attrs


def random_raster_scene(seed: int, n: int = 10, dims=(24, 28), channels: int = 3) -> RasterScene:
    """A sparse scene spanning several tiles with every box edge clear of pixel centres."""
    rng = stream(seed, "gradcheck-raster")
    h, w = dims
    while True:
        mu, ls, th = [], [], []
        while len(mu) < n:
            m = rng.uniform([1.5, 1.5], [w - 2.5, h - 2.5])
            l = np.log(rng.uniform(0.7, 3.0, 2))
            t = rng.uniform(-math.pi, math.pi)
            if _edges_clear(m, l, t):
                mu.append(m), ls.append(l), th.append(t)
        scene = RasterScene(np.array(mu), np.array(ls), np.array(th), rng.uniform(-1, 1, n),
                            rng.uniform(-1, 1, (n, channels)), dims)
        out = raster.render(*scene.args(), dims)
        if out.accum_opacity.max() < 1.0 - 10 * raster.T_MIN:
            return scene


def check_raster(scene: RasterScene, mode=raster.ALPHA, h: float = 1e-5, seed: int = 0) -> dict:
    """Max error per parameter class for ``sum(weights * render)``."""
    weights = stream(seed, "gradcheck-weights").uniform(-1, 1, scene.dims + (scene.attrs.shape[1],))
    args = [a.copy() for a in scene.args()]
    grads = raster.render_backward(*args, scene.dims, weights, mode)
    analytic = [grads.mu, grads.log_scale, grads.theta, grads.opacity_logit, grads.attrs]
    names = {0: "mu", 1: "log_scale", 2: "theta", 3: "opacity_logit", 4: "attr"}

    def loss(a):
        return float((raster.render(*a, scene.dims, mode).image * weights).sum())

    report = {}
    for k, name in names.items():
        errs = []
        for idx in np.ndindex(args[k].shape):
            orig = args[k][idx]
            args[k][idx] = orig + h
            up = loss(args)
            args[k][idx] = orig - h
            down = loss(args)
            args[k][idx] = orig
            errs.append(rel_error(analytic[k][idx], (up - down) / (2 * h)))
        report[name] = float(max(errs))
    return report


@dataclass
class ChainScene:
    scene: Scene
    dictionary: Dictionary
    ctx: LossContext
    logits: np.ndarray
    bias: np.ndarray


def random_chain_scene(seed: int, dims=(24, 28), k: int = 4, order: int = 5) -> ChainScene:
    """Low-light image, two frozen levels, a random brightening dictionary."""
    rng = stream(seed, "gradcheck-chain")
    h, w = dims
    img = rng.uniform(0.02, 0.3, (h, w, 3))
    levels = []
    for s, (lh, lw) in enumerate(pyramid_dims(h, w, 2)):
        lv = init_gaussians(img[:lh, :lw], 15 if s == 0 else 40, seed=seed, level=s)
        lv.opacity_logit[:] = rng.uniform(-1, 1, lv.count)
        lv.freeze()
        levels.append(lv)
    dictionary = Dictionary(np.vstack([np.zeros(order), -rng.uniform(0.1, 0.9, (k, order))]))
    scene = Scene.from_model(GaussianSet(levels))
    ctx = LossContext.build(img, EnhanceConfig(blur_sigma=2.0))
    logits = init_logits(scene, img, dictionary) + rng.normal(0, 0.5, (scene.count, k + 1))
    return ChainScene(scene, dictionary, ctx, logits, rng.uniform(-0.05, 0.05, 3))


def check_chain(cs: ChainScene, h: float = 1e-6) -> dict:
    ev = evaluate_objective(cs.scene, cs.dictionary, cs.ctx, cs.logits, cs.bias)

    def loss(logits, bias):
        return evaluate_objective(cs.scene, cs.dictionary, cs.ctx, logits, bias, want_grad=False).loss

    report = {}
    for name, base, analytic in (("logits", cs.logits, ev.grad_logits), ("bias", cs.bias, ev.grad_bias)):
        errs = []
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            if name == "logits":
                num = (loss(plus, cs.bias) - loss(minus, cs.bias)) / (2 * h)
            else:
                num = (loss(cs.logits, plus) - loss(cs.logits, minus)) / (2 * h)
            errs.append(rel_error(analytic[idx], num))
        report[name] = float(max(errs))
    return report


@dataclass
class GradcheckReport:
    seed: int
    errors: dict = field(default_factory=dict)     # "<mode>/<class>" or class -> max error

    @property
    def passed(self) -> bool:
        return all(e < REL_TOL for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{k:<22} max rel err {v:.3e}  {'ok' if v < REL_TOL else 'FAIL'}" for k, v in self.errors.items()]
        out.append(f"seed {self.seed}: {'PASS' if self.passed else 'FAIL'}")
        return out


def gradcheck(seed: int = 0) -> GradcheckReport:
    rep = GradcheckReport(seed)
    scene = random_raster_scene(seed)
    for mode in raster.MODES:
        for name, err in check_raster(scene, mode, seed=seed).items():
            rep.errors[f"{mode}/{name}"] = err
    rep.errors.update(check_chain(random_chain_scene(seed)))
    return rep
