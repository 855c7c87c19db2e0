"""Enhancement dictionary: quadratic curves, per-image fits, K-Means atoms.

A curve with coefficients ``a`` (length P) is applied as P chained quadratic
steps ``u <- u + a_p * (u^2 - u)``.  Coefficients are clamped to [-1, 1], which
keeps every iterate inside [0, 1].  The dictionary stacks a zero (identity)
atom on top of K cluster centres of the fitted coefficient cloud.
"""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import ImageDecodeError, as_image, load_image
from .rng import stream

log = logging.getLogger(__name__)

DICT_MAGIC = b"LLGD"
DICT_VERSION = 1
COEF_BOUND = 1.0
DEFAULT_TARGETS = (0.4, 0.5, 0.6, 0.7)


class DictionaryFormatError(ValueError):
    """Malformed ``.llgd`` file or a dictionary that violates its invariants."""


class CorpusTooSmallError(ValueError):
    pass


def apply_curve(v, a) -> np.ndarray:
    """Apply the iterated quadratic curve.

    ``a`` is either a single ``(P,)`` vector or per-element coefficients of
    shape ``v.shape + (P,)``.
    """
    u = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    for p in range(a.shape[-1]):
        u = u + a[..., p] * (u * u - u)
    return u


def curve_backward(v, a, grad_out):
    """Gradients of ``sum(grad_out * apply_curve(v, a))`` w.r.t. ``v`` and ``a``.

    ``a`` has shape ``v.shape + (P,)``; both gradients come back full-shaped.
    """
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    p_n = a.shape[-1]
    us = [v]
    for p in range(p_n - 1):
        u = us[-1]
        us.append(u + a[..., p] * (u * u - u))
    g = np.asarray(grad_out, dtype=np.float64)
    da = np.empty(np.broadcast_shapes(v.shape + (p_n,), a.shape))
    for p in range(p_n - 1, -1, -1):
        u = us[p]
        da[..., p] = g * (u * u - u)
        g = g * (1.0 + a[..., p] * (2.0 * u - 1.0))
    return g, da


@dataclass
class CurveFit:
    a: np.ndarray
    degenerate: bool = False
    mean: float = 0.0     # brightness reached by the fitted curve


def _value_histogram(img) -> tuple[np.ndarray, np.ndarray]:
    vals, counts = np.unique(np.asarray(img, dtype=np.float64).ravel(), return_counts=True)
    return vals, counts / counts.sum()


def fit_alpha(img, e_ref: float, order: int = 5, steps: int = 500, lr: float = 0.05,
              tol: float = 1e-4) -> CurveFit:
    """Fit curve coefficients so the enhanced image has mean ``e_ref``.

    Order 1 is solved in closed form; higher orders use projected gradient
    descent from zero.  Images whose values sit on the curve's fixed points
    (all 0 or all 1) come back as the zero curve flagged ``degenerate``.
    """
    if order < 1:
        raise ValueError("curve order must be >= 1")
    if not 0.0 < e_ref < 1.0:
        raise ValueError("e_ref must lie in (0, 1)")
    vals, w = _value_histogram(img)
    if vals.size == 0:
        raise ValueError("empty image")
    basis = float(w @ (vals * vals - vals))
    m0 = float(w @ vals)
    if abs(basis) < 1e-12:
        return CurveFit(np.zeros(order), degenerate=True, mean=m0)
    if order == 1:
        a = np.clip([(e_ref - m0) / basis], -COEF_BOUND, COEF_BOUND)
        return CurveFit(a, mean=float(w @ apply_curve(vals, a)))
    a = np.zeros(order)
    ones = np.ones_like(vals)
    for _ in range(steps):
        a_full = np.broadcast_to(a, vals.shape + (order,))
        m = float(w @ apply_curve(vals, a_full))
        if abs(m - e_ref) < tol:
            break
        _, da = curve_backward(vals, a_full, ones)
        grad = 2.0 * (m - e_ref) * (w @ da)
        a = np.clip(a - lr * grad, -COEF_BOUND, COEF_BOUND)
    return CurveFit(a, mean=float(w @ apply_curve(vals, a)))


# --- K-Means --------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: list[float]
    reseeded: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are moved onto the point farthest from its centre.  The
    inertia history holds the objective after each assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < k or k < 1:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    centers = _kmeans_pp(x, k, stream(seed, "kmeans"))
    history: list[float] = []
    reseeded = 0
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(len(x)), labels]
        history.append(float(point_d2.sum()))
        if len(history) > 1 and history[-2] - history[-1] < tol:
            break
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centers[j] = x[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(point_d2.argmax())
            centers[j] = x[far]
            point_d2[far] = -1.0
            reseeded += 1
    labels = _sq_dists(x, centers).argmin(axis=1)
    for j in range(k):
        if np.any(labels == j):
            centers[j] = x[labels == j].mean(axis=0)
    return KMeansResult(centers, labels, history, reseeded)


# --- dictionary -------------------------------------------------------------


@dataclass
class Dictionary:
    atoms: np.ndarray             # (K + 1, P), row 0 is the identity atom
    seed: int = 0
    corpus: str = ""

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float32).astype(np.float64)
        self.validate()

    @property
    def k(self) -> int:
        return self.atoms.shape[0] - 1

    @property
    def order(self) -> int:
        return self.atoms.shape[1]

    def validate(self) -> None:
        if self.atoms.ndim != 2 or self.atoms.shape[0] < 2 or self.atoms.shape[1] < 1:
            raise DictionaryFormatError(f"atoms must be (K+1, P) with K, P >= 1, got {self.atoms.shape}")
        if not np.all(np.isfinite(self.atoms)):
            raise DictionaryFormatError("dictionary atoms must be finite")
        if np.any(self.atoms[0] != 0.0):
            raise DictionaryFormatError("row 0 of the dictionary must be the zero atom")

    def duplicate_atoms(self) -> list[tuple[int, int]]:
        out = []
        for i in range(1, self.k + 1):
            for j in range(i + 1, self.k + 1):
                if np.array_equal(self.atoms[i], self.atoms[j]):
                    out.append((i, j))
        return out


@dataclass
class DictionaryBuild:
    dictionary: Dictionary
    coefficients: np.ndarray         # A_total, one row per (image, target)
    labels: np.ndarray
    inertia_history: list[float]
    skipped: list[str] = field(default_factory=list)
    degenerate: int = 0


def build_dictionary_from_images(images, k: int = 30, order: int = 5, targets=DEFAULT_TARGETS,
                                 seed: int = 0, corpus: str = "") -> DictionaryBuild:
    if k < 1:
        raise ValueError("k must be >= 1")
    coefs, degenerate = [], 0
    for img in images:
        img = as_image(img)
        for e in targets:
            f = fit_alpha(img, e, order)
            if f.degenerate:
                degenerate += 1
                continue
            coefs.append(f.a)
    if len(coefs) < k:
        raise CorpusTooSmallError(
            f"only {len(coefs)} usable coefficient vectors for k={k}; use k <= {len(coefs)} or a larger corpus")
    a_total = np.array(coefs)
    km = kmeans(a_total, k, seed)
    atoms = np.vstack([np.zeros((1, order)), km.centers])
    d = Dictionary(atoms, seed=seed, corpus=corpus)
    dups = d.duplicate_atoms()
    if dups:
        log.warning("dictionary has %d duplicate atom pairs (corpus too uniform for k=%d)", len(dups), k)
    return DictionaryBuild(d, a_total, km.labels, km.inertia_history, degenerate=degenerate)


IMAGE_SUFFIXES = (".png", ".ppm")


def build_dictionary(corpus, k: int = 30, order: int = 5, targets=DEFAULT_TARGETS, seed: int = 0) -> DictionaryBuild:
    """Build from a directory or a list of image paths; unreadable files are skipped."""
    if isinstance(corpus, (str, os.PathLike)) and Path(corpus).is_dir():
        tag = Path(corpus).name
        paths = sorted(p for p in Path(corpus).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        paths = [Path(p) for p in corpus]
        tag = ",".join(p.name for p in paths)
    images, skipped = [], []
    for p in paths:
        try:
            img = load_image(p)
        except (OSError, ImageDecodeError) as exc:
            log.warning("skipping %s: %s", p, exc)
            skipped.append(str(p))
            continue
        images.append(img if img.shape[2] == 3 else np.repeat(img, 3, axis=2))
    if not images:
        raise CorpusTooSmallError("corpus contains no readable images")
    out = build_dictionary_from_images(images, k, order, targets, seed, corpus=tag)
    out.skipped = skipped
    return out


def save_dictionary(d: Dictionary, path) -> None:
    d.validate()
    tag = d.corpus.encode("utf-8")
    blob = b"".join([
        DICT_MAGIC,
        struct.pack("<III", DICT_VERSION, d.k, d.order),
        np.ascontiguousarray(d.atoms, dtype="<f4").tobytes(),
        struct.pack("<QI", d.seed, len(tag)),
        tag,
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DICT_MAGIC:
        raise DictionaryFormatError(f"{os.fspath(path)}: bad magic, not an .llgd dictionary")
    try:
        version, k, p = struct.unpack_from("<III", buf, 4)
        if version != DICT_VERSION:
            raise DictionaryFormatError(f"unsupported dictionary version {version}")
        pos = 16
        n = (k + 1) * p
        if len(buf) < pos + 4 * n:
            raise DictionaryFormatError("truncated dictionary file")
        atoms = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(k + 1, p)
        pos += 4 * n
        seed, tag_len = struct.unpack_from("<QI", buf, pos)
        pos += 12
        if len(buf) != pos + tag_len:
            raise DictionaryFormatError("dictionary trailer length mismatch")
        tag = buf[pos:pos + tag_len].decode("utf-8")
    except struct.error as exc:
        raise DictionaryFormatError(f"truncated dictionary file ({exc})") from exc
    return Dictionary(atoms, seed=seed, corpus=tag)


def export_manifold_csv(coefficients, labels, dictionary: Dictionary, out_dir) -> tuple[Path, Path]:
    """Write ``manifold.csv`` (coefficients + cluster id) and ``curves.csv`` (101 samples per atom)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    coefficients = np.asarray(coefficients)
    manifold = out_dir / "manifold.csv"
    with open(manifold, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"a{p + 1}" for p in range(coefficients.shape[1])] + ["cluster"])
        for row, lab in zip(coefficients, labels):
            wr.writerow([f"{x:.9g}" for x in row] + [int(lab)])
    curves = out_dir / "curves.csv"
    v = np.round(np.arange(101) * 0.01, 2)
    with open(curves, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["atom", "v", "t"])
        for k, atom in enumerate(dictionary.atoms):
            for vi, ti in zip(v, apply_curve(v, atom)):
                wr.writerow([k, f"{vi:.2f}", f"{ti:.9g}"])
    return manifold, curves
