"""2D Gaussian primitives: parameterization, covariance, extents and storage.

Coordinates are continuous pixel coordinates ``(x, y)`` with pixel centres on
integers, ``x`` along columns.  Scales are kept in log space and projected to
``SCALE_FLOOR`` after every optimizer step; opacity is the sigmoid of a logit.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

SCALE_FLOOR = 0.3
LOG_SCALE_FLOOR = math.log(SCALE_FLOOR)
EXTENT_SIGMAS = 3.0

MODEL_MAGIC = b"LLGM"
MODEL_VERSION = 1
_FLAG_LOGITS = 1
_FLAG_FROZEN = 2


class ModelFormatError(ValueError):
    """Raised for malformed or incompatible ``.llgm`` files."""


class FrozenGeometryError(RuntimeError):
    """Raised when geometry of a frozen level is modified."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def covariance(theta, scales):
    """Return ``(a, b, c)`` with ``Sigma = [[a, b], [b, c]] = R S S^T R^T``.

    Works elementwise on arrays: ``theta`` has shape ``(...)`` and ``scales``
    shape ``(..., 2)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    cs, sn = np.cos(theta), np.sin(theta)
    sx2, sy2 = scales[..., 0] ** 2, scales[..., 1] ** 2
    a = cs * cs * sx2 + sn * sn * sy2
    b = cs * sn * (sx2 - sy2)
    c = sn * sn * sx2 + cs * cs * sy2
    return a, b, c


def covariance_matrix(theta: float, scales) -> np.ndarray:
    a, b, c = covariance(theta, scales)
    return np.array([[a, b], [b, c]])


def gaussian_response(mu, theta, scales, x) -> np.ndarray:
    """``exp(-0.5 (x - mu)^T Sigma^-1 (x - mu))``, evaluated in the rotated frame."""
    mu = np.asarray(mu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    d = x - mu
    cs, sn = math.cos(theta), math.sin(theta)
    u = cs * d[..., 0] + sn * d[..., 1]
    w = -sn * d[..., 0] + cs * d[..., 1]
    return np.exp(-0.5 * ((u / scales[0]) ** 2 + (w / scales[1]) ** 2))


def extent_3sigma(mu, theta, scales, dims=None):
    """Inclusive integer pixel box ``(x0, x1, y0, y1)`` covered by the 3-sigma extent.

    Without ``dims`` the box is returned as floats and unclipped.  With
    ``dims = (H, W)`` it is snapped to pixel centres and clipped; ``None`` is
    returned when it misses the image.
    """
    a, _, c = covariance(theta, scales)
    rx, ry = EXTENT_SIGMAS * math.sqrt(a), EXTENT_SIGMAS * math.sqrt(c)
    mx, my = float(mu[0]), float(mu[1])
    if dims is None:
        return (mx - rx, mx + rx, my - ry, my + ry)
    h, w = dims
    x0 = max(math.ceil(mx - rx), 0)
    x1 = min(math.floor(mx + rx), w - 1)
    y0 = max(math.ceil(my - ry), 0)
    y1 = min(math.floor(my + ry), h - 1)
    if x0 > x1 or y0 > y1:
        return None
    return (x0, x1, y0, y1)


_GEOMETRY = ("mu", "log_scale", "theta", "color", "opacity_logit")


@dataclass(eq=False)
class GaussianLevel:
    """Structure-of-arrays parameters for one pyramid level."""

    height: int
    width: int
    mu: np.ndarray
    log_scale: np.ndarray
    theta: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    enh_logits: np.ndarray | None = None
    frozen: bool = False

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32).reshape(n, 2)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float32).reshape(n, 2)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float32).reshape(n)
        self.color = np.ascontiguousarray(self.color, dtype=np.float32).reshape(n, -1)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float32).reshape(n)
        if self.enh_logits is not None:
            self.enh_logits = np.ascontiguousarray(self.enh_logits, dtype=np.float32).reshape(n, -1)
        if self.frozen:
            self.freeze()

    @property
    def count(self) -> int:
        return len(self.mu)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.astype(np.float64))

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def freeze(self) -> None:
        self.frozen = True
        for name in _GEOMETRY:
            getattr(self, name).flags.writeable = False

    def set_geometry(self, **arrays) -> None:
        if self.frozen:
            raise FrozenGeometryError("level geometry is frozen")
        for name, value in arrays.items():
            if name not in _GEOMETRY:
                raise KeyError(name)
            old = getattr(self, name)
            setattr(self, name, np.ascontiguousarray(value, dtype=np.float32).reshape(old.shape))

    def set_logits(self, logits) -> None:
        self.enh_logits = np.ascontiguousarray(logits, dtype=np.float32).reshape(self.count, -1)

    def validate(self) -> None:
        n = self.count
        for name in _GEOMETRY:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if self.enh_logits is not None and len(self.enh_logits) != n:
            raise ValueError("enh_logits row count mismatch")


@dataclass(eq=False)
class GaussianSet:
    """Gaussian levels ordered coarse to fine."""

    levels: list[GaussianLevel] = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int]:
        return self.levels[-1].dims

    @property
    def count(self) -> int:
        return sum(lv.count for lv in self.levels)

    @property
    def frozen(self) -> bool:
        return all(lv.frozen for lv in self.levels)

    @property
    def logit_width(self) -> int | None:
        widths = {lv.enh_logits.shape[1] for lv in self.levels if lv.enh_logits is not None}
        if not widths:
            return None
        if len(widths) > 1:
            raise ModelFormatError(f"levels disagree on logit width: {sorted(widths)}")
        return widths.pop()

    def freeze(self) -> None:
        for lv in self.levels:
            lv.freeze()

    def validate(self) -> None:
        prev = (0, 0)
        for lv in self.levels:
            lv.validate()
            if lv.height < prev[0] or lv.width < prev[1]:
                raise ValueError("level dims must be non-decreasing toward the finest level")
            prev = lv.dims


# --- .llgm serialization -------------------------------------------------


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(gset: GaussianSet, path: str | os.PathLike) -> None:
    """Write a GaussianSet in the little-endian ``.llgm`` layout."""
    gset.validate()
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(gset.levels))]
    for lv in gset.levels:
        flags = (_FLAG_LOGITS if lv.enh_logits is not None else 0) | (_FLAG_FROZEN if lv.frozen else 0)
        chunks.append(struct.pack("<IIII", lv.height, lv.width, lv.count, flags))
        chunks += [_f32(lv.mu), _f32(lv.log_scale), _f32(lv.theta)]
        chunks += [struct.pack("<I", lv.color.shape[1]), _f32(lv.color), _f32(lv.opacity_logit)]
        if lv.enh_logits is not None:
            chunks += [struct.pack("<I", lv.enh_logits.shape[1]), _f32(lv.enh_logits)]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def load_model(path: str | os.PathLike) -> GaussianSet:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{os.fspath(path)}: bad magic, not an .llgm model")
    version = r.u32()
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    levels = []
    for _ in range(r.u32()):
        h, w, n, flags = r.u32(), r.u32(), r.u32(), r.u32()
        mu = r.f32(2 * n).reshape(n, 2)
        log_scale = r.f32(2 * n).reshape(n, 2)
        theta = r.f32(n)
        c = r.u32()
        color = r.f32(c * n).reshape(n, c)
        opacity = r.f32(n)
        logits = None
        if flags & _FLAG_LOGITS:
            k1 = r.u32()
            logits = r.f32(k1 * n).reshape(n, k1)
        levels.append(GaussianLevel(h, w, mu, log_scale, theta, color, opacity, logits,
                                    frozen=bool(flags & _FLAG_FROZEN)))
    if r.pos != len(r.buf):
        raise ModelFormatError("trailing bytes after model payload")
    gset = GaussianSet(levels)
    gset.validate()
    return gset


def merged_full_resolution(gset: GaussianSet):
    """All levels mapped into finest-level pixel coordinates, coarse first.

    Returns float64 ``(mu, log_scale, theta, opacity_logit)``; the order of
    rows is the compositing order.
    """
    h, w = gset.dims
    mus, scales, thetas, ops = [], [], [], []
    for lv in gset.levels:
        fx, fy = w / lv.width, h / lv.height
        mu = lv.mu.astype(np.float64)
        ls = lv.log_scale.astype(np.float64)
        th = lv.theta.astype(np.float64)
        if fx == 1.0 and fy == 1.0:
            pass
        elif fx == fy:
            mu = (mu + 0.5) * fx - 0.5
            ls = ls + math.log(fx)
        else:
            mu = (mu + 0.5) * np.array([fx, fy]) - 0.5
            a, b, c = covariance(th, np.exp(ls))
            a, b, c = a * fx * fx, b * fx * fy, c * fy * fy
            # eigen-decomposition of the stretched covariance
            th = 0.5 * np.arctan2(2 * b, a - c)
            disc = np.sqrt(((a - c) * 0.5) ** 2 + b * b)
            l1 = 0.5 * (a + c) + disc
            l2 = np.maximum(0.5 * (a + c) - disc, SCALE_FLOOR ** 2)
            ls = 0.5 * np.log(np.stack([l1, l2], axis=1))
        mus.append(mu)
        scales.append(ls)
        thetas.append(th)
        ops.append(lv.opacity_logit.astype(np.float64))
    return (np.concatenate(mus).reshape(-1, 2), np.concatenate(scales).reshape(-1, 2),
            np.concatenate(thetas), np.concatenate(ops))
