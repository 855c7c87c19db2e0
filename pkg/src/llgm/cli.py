"""``llgm`` command line: fit, dict, enhance, eval, gradcheck.

Every option can also come from a ``key = value`` file passed with
``--config``; keys are the long option names (dashes or underscores).
Options given on the command line win over the file.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import raster
from .dictionary import (DEFAULT_TARGETS, CorpusTooSmallError, build_dictionary, export_manifold_csv,
                         load_dictionary, save_dictionary)
from .enhance import (EnhanceConfig, check_compatible, enhance, save_gain_png, save_gain_raw,
                      save_omega_pngs, write_trace_csv)
from .gaussians import load_model, save_model
from .gradcheck import gradcheck
from .image import ImageDecodeError, load_image, luminance, save_image
from .metrics import evaluate
from .reconstruct import ReconConfig, fit

log = logging.getLogger("llgm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or missing inputs; maps to exit code 2."""


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _rgb(img: np.ndarray) -> np.ndarray:
    return img if img.shape[2] == 3 else np.repeat(img[:, :, :1], 3, axis=2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with default option values")
    common.add_argument("--threads", type=int, help="worker threads (default: $LLGM_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="llgm", description="Gaussian-splatting low-light enhancement.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit a Gaussian pyramid to an image")
    f.add_argument("input")
    f.add_argument("--preset", choices=("desk", "paper"), default="desk")
    f.add_argument("--gaussians", type=int)
    f.add_argument("--scales", type=int)
    f.add_argument("--iters", type=int, help="iterations per level")
    f.add_argument("--lr", type=float)
    f.add_argument("--ssim-weight", type=float)
    f.add_argument("--split", type=_floats, help="per-level primitive fractions, coarse first")
    f.add_argument("--mode", choices=raster.MODES)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--log", help="per-iteration loss CSV")

    d = sub.add_parser("dict", parents=[common], help="build a curve dictionary from a corpus")
    d.add_argument("--corpus", required=True)
    d.add_argument("--k", type=int, default=30)
    d.add_argument("--p", type=int, default=5)
    d.add_argument("--targets", type=_floats, default=DEFAULT_TARGETS)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--export-csv", help="directory for manifold.csv and curves.csv")

    e = sub.add_parser("enhance", parents=[common], help="enhance an image with a fitted model")
    e.add_argument("input")
    e.add_argument("--model", required=True)
    e.add_argument("--dict", required=True)
    e.add_argument("--preset", choices=("desk", "paper"), default="desk")
    e.add_argument("--iters", type=int)
    e.add_argument("--lr", type=float)
    e.add_argument("--etarget", type=float)
    e.add_argument("--blur-sigma", type=float)
    e.add_argument("--weights", type=_floats, help="six loss weights")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--save-model", help="write the model with its optimized logits")
    e.add_argument("--dump-gain", help="gain map PNG (min-max normalized)")
    e.add_argument("--dump-gain-raw", help="gain map as raw f32")
    e.add_argument("--dump-omega", help="directory for per-atom weight PNGs")
    e.add_argument("--log", help="loss trace CSV")

    v = sub.add_parser("eval", parents=[common], help="quality metrics for an image")
    v.add_argument("--pred", required=True)
    v.add_argument("--ref")
    v.add_argument("--original", help="unenhanced input for LOE (defaults to --ref)")
    v.add_argument("--out", help="also write the JSON report here")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1, help="check this many consecutive seeds")
    return p


def read_config(path) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        pairs.append((key.strip().replace("_", "-"), value.strip()))
    return pairs


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def _config_tokens(parser, command: str, pairs) -> list[str]:
    sub = _subparser(parser, command)
    known = {s[2:]: a for a in sub._actions for s in a.option_strings if s.startswith("--")}
    known.pop("config", None)
    known.pop("help", None)
    tokens = []
    for key, value in pairs:
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for '{command}' (known: {', '.join(sorted(known))})")
        if known[key].nargs == 0:             # switches take yes/no in the file
            if value.lower() not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects yes/no, got {value!r}")
            if value.lower() in ("1", "true", "yes", "on"):
                tokens.append(f"--{key}")
        else:
            tokens += [f"--{key}", value]
    return tokens


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((t for t in argv if t in COMMANDS), None)
        if command is None:
            parser.parse_args(argv)          # reports the missing command
        tokens = _config_tokens(parser, command, read_config(known.config))
        pos = argv.index(command) + 1
        argv = argv[:pos] + tokens + argv[pos:]
    return parser.parse_args(argv)


def _need_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _need_parent(path) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


def _recon_config(a) -> ReconConfig:
    kw = {k: v for k, v in (("num_primitives", a.gaussians), ("scales", a.scales), ("iterations", a.iters),
                            ("lr", a.lr), ("ssim_weight", a.ssim_weight), ("split", a.split),
                            ("mode", a.mode)) if v is not None}
    cfg = (ReconConfig.paper if a.preset == "paper" else ReconConfig)(seed=a.seed, **kw)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"invalid fit config: {exc}") from None
    return cfg


def _enhance_config(a) -> EnhanceConfig:
    kw = {k: v for k, v in (("iterations", a.iters), ("lr", a.lr), ("e_target", a.etarget),
                            ("blur_sigma", a.blur_sigma), ("weights", a.weights)) if v is not None}
    cfg = (EnhanceConfig.paper if a.preset == "paper" else EnhanceConfig)(seed=a.seed, **kw)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"invalid enhance config: {exc}") from None
    return cfg


def cmd_fit(a) -> int:
    cfg = _recon_config(a)
    _need_file(a.input, "input image")
    _need_parent(a.out)
    img = _rgb(load_image(a.input))
    res = fit(img, cfg, log_csv=a.log)
    save_model(res.model, a.out)
    print(f"fit {img.shape[1]}x{img.shape[0]}, {cfg.num_primitives} primitives, {cfg.scales} levels")
    print(f"PSNR {res.psnr:.2f} dB (initial {res.initial_psnr:.2f} dB)")
    print(f"model written to {a.out}")
    return EXIT_OK


def cmd_dict(a) -> int:
    if a.k < 1 or a.p < 1:
        raise UsageError("--k and --p must be >= 1")
    if not a.targets or not all(0 < t < 1 for t in a.targets):
        raise UsageError("--targets must be numbers in (0, 1)")
    if not Path(a.corpus).is_dir():
        raise UsageError(f"corpus directory not found: {a.corpus}")
    _need_parent(a.out)
    try:
        built = build_dictionary(a.corpus, a.k, a.p, a.targets, a.seed)
    except CorpusTooSmallError as exc:
        raise UsageError(str(exc)) from None
    save_dictionary(built.dictionary, a.out)
    if a.export_csv:
        export_manifold_csv(built.coefficients, built.labels, built.dictionary, a.export_csv)
    print(f"{len(built.coefficients)} coefficient vectors, {built.degenerate} degenerate, "
          f"{len(built.skipped)} files skipped")
    print(f"inertia {built.inertia_history[-1]:.6g} after {len(built.inertia_history)} iterations")
    print(f"{built.dictionary.k + 1} atoms (K={built.dictionary.k}, P={built.dictionary.order}) written to {a.out}")
    return EXIT_OK


def cmd_enhance(a) -> int:
    cfg = _enhance_config(a)
    for path, what in ((a.input, "input image"), (a.model, "model"), (a.dict, "dictionary")):
        _need_file(path, what)
    for path in (a.out, a.save_model, a.dump_gain, a.dump_gain_raw, a.log):
        if path:
            _need_parent(path)
    img = _rgb(load_image(a.input))
    model = load_model(a.model)
    dictionary = load_dictionary(a.dict)
    check_compatible(model, dictionary, img)
    res = enhance(img, model, dictionary, cfg)
    save_image(res.output, a.out)
    if a.save_model:
        for lv, logits in zip(model.levels, res.logits):
            lv.set_logits(logits)
        save_model(model, a.save_model)
    if a.dump_gain:
        save_gain_png(res.gain, a.dump_gain)
    if a.dump_gain_raw:
        save_gain_raw(res.gain, a.dump_gain_raw)
    if a.dump_omega:
        save_omega_pngs(res.omega, a.dump_omega)
    if a.log:
        write_trace_csv(res.trace, a.log)
    dg = res.diagnostics
    print(f"final loss {dg['final_loss']:.6f}")
    print(f"mean luminance {dg['mean_luminance_in']:.4f} -> {dg['mean_luminance_out']:.4f} "
          f"(delta {dg['mean_luminance_out'] - dg['mean_luminance_in']:+.4f})")
    print(f"output written to {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    paths = [("prediction", a.pred), ("reference", a.ref), ("original", a.original)]
    for what, path in paths:
        if path:
            _need_file(path, what)
    pred, ref, orig = (load_image(p) if p else None for _, p in paths)
    for what, other in (("reference", ref), ("original", orig)):
        if other is not None and other.shape[:2] != pred.shape[:2]:
            raise ValueError(f"{what} is {other.shape[1]}x{other.shape[0]} but prediction is "
                             f"{pred.shape[1]}x{pred.shape[0]}")
    if ref is not None and ref.shape[2] != pred.shape[2]:
        pred, ref = _rgb(pred), _rgb(ref)
    report = evaluate(pred, ref, orig if orig is None or orig.shape == pred.shape else _rgb(orig))
    print(report.to_json())
    if a.out:
        Path(a.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    ok = True
    for seed in range(a.seed, a.seed + max(1, a.count)):
        rep = gradcheck(seed)
        print("\n".join(rep.lines()))
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def _thread_count(flag):
    value = flag if flag is not None else os.environ.get("LLGM_THREADS")
    if value is None or value == "":
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"LLGM_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


COMMANDS = {"fit": cmd_fit, "dict": cmd_dict, "enhance": cmd_enhance, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"llgm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _thread_count(args.threads)
        if threads is not None:
            raster.set_threads(threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"llgm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageDecodeError, OSError, ValueError) as exc:
        print(f"llgm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
