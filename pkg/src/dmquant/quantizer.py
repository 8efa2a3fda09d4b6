"""Uniform affine fake quantization and metric-driven parameter search.

The integer code of an element is ``clamp(round(x / s) - z, p_min, p_max)`` with
round-half-to-even, and the simulated value is ``s * (code + z)``. Parameters are
chosen by scanning a linear grid of candidate scales and keeping the one whose
simulated tensor is closest to the original under a :class:`QuantMetric`.
"""
from dataclasses import dataclass

import numpy as np

from dmquant._backend import kernels, num_threads
from dmquant.core import ConfigError, DimensionError, InputError

KL_SMOOTHING = 1e-10


def int_range(bits, signed):
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale/zero-point pairs; ``axis=None`` means one pair for the whole tensor."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int = 8
    signed: bool = True
    axis: int | None = None

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        zp = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be in [2, 16], got {self.bits}")
        if scale.shape != zp.shape:
            raise ConfigError("scale and zero_point must have the same length")
        if self.axis is None and scale.size != 1:
            raise ConfigError("per-tensor params need exactly one scale")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ConfigError("scales must be finite and positive")
        lo, hi = self.int_range
        if np.any(zp < lo) or np.any(zp > hi):
            raise ConfigError(f"zero point outside [{lo}, {hi}]")

    @property
    def int_range(self):
        return int_range(self.bits, self.signed)

    @property
    def granularity(self):
        return "per-tensor" if self.axis is None else "per-channel"

    def to_json(self):
        d = {"bits": self.bits, "signed": self.signed, "granularity": self.granularity}
        if self.axis is None:
            d["scale"] = float(self.scale[0])
            d["zero_point"] = int(self.zero_point[0])
        else:
            d["scales"] = [float(s) for s in self.scale]
            d["zero_points"] = [int(z) for z in self.zero_point]
            d["axis"] = self.axis
        return d

    @classmethod
    def from_json(cls, d):
        if d.get("granularity", "per-tensor") == "per-tensor":
            return cls(d["scale"], d["zero_point"], d["bits"], d["signed"])
        return cls(d["scales"], d["zero_points"], d["bits"], d["signed"], axis=d["axis"])

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return self.to_json() == other.to_json()


@dataclass(frozen=True)
class QuantMetric:
    """Distance between a simulated tensor and its full-precision original.

    ``kind`` is one of ``"lp"``, ``"l1"``, ``"cosine"``, ``"kl"``. The "MSE"
    metric used for calibration reports is ``lp`` with ``p=2.4``.
    """

    kind: str = "lp"
    p: float = 2.4
    bins: int = 2048

    def __post_init__(self):
        if self.kind not in ("lp", "l1", "cosine", "kl"):
            raise ConfigError(f"unknown metric kind {self.kind!r}")
        if self.kind == "lp" and not self.p >= 1:
            raise ConfigError("Lp metric requires p >= 1")
        if self.kind == "kl" and self.bins < 2:
            raise ConfigError("KL metric requires bins >= 2")

    @classmethod
    def parse(cls, text):
        """``"lp2.4"``, ``"mse"``, ``"l1"``, ``"cosine"``, ``"kl"`` or ``"kl512"``."""
        t = str(text).strip().lower()
        if t == "mse":
            return cls("lp", 2.4)
        if t in ("l1", "cosine"):
            return cls(t)
        if t.startswith("lp"):
            return cls("lp", float(t[2:]) if len(t) > 2 else 2.4)
        if t.startswith("kl"):
            return cls("kl", bins=int(t[2:]) if len(t) > 2 else 2048)
        raise ConfigError(f"unknown metric {text!r}")

    @property
    def name(self):
        if self.kind == "lp":
            return f"lp{self.p:g}"
        if self.kind == "kl":
            return "kl" if self.bins == 2048 else f"kl{self.bins}"
        return self.kind


def Lp(p=2.4):
    return QuantMetric("lp", p)


def L1():
    return QuantMetric("l1")


def Cosine():
    return QuantMetric("cosine")


def KL(bins=2048):
    return QuantMetric("kl", bins=bins)


@dataclass(frozen=True)
class SearchConfig:
    num_candidates: int = 100
    min_scale_fraction: float = 0.2
    symmetric: bool = False

    def __post_init__(self):
        if self.num_candidates < 2:
            raise ConfigError("num_candidates must be >= 2")
        if not 0 < self.min_scale_fraction < 1:
            raise ConfigError("min_scale_fraction must be in (0, 1)")


def _as_rows(x, axis):
    """View ``x`` as a 2-D (channels, elements) array."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        return np.ascontiguousarray(x.reshape(1, -1))
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return np.ascontiguousarray(np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1))


def _from_rows(rows, shape, axis):
    if axis is None:
        return rows.reshape(shape)
    moved = (shape[axis],) + tuple(d for i, d in enumerate(shape) if i != axis % len(shape))
    return np.moveaxis(rows.reshape(moved), 0, axis)


def _check(x, q):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("quantization input contains non-finite values")
    rows = _as_rows(x, q.axis)
    if rows.shape[0] != q.scale.size:
        raise DimensionError(f"{q.scale.size} channel params for {rows.shape[0]} channels")
    return x, rows


def quantize(x, q):
    """Integer codes ``clamp(round_half_even(x / s) - z, p_min, p_max)``."""
    x, rows = _check(x, q)
    lo, hi = q.int_range
    codes = np.rint(rows / q.scale[:, None]) - q.zero_point[:, None]
    np.clip(codes, lo, hi, out=codes)
    return _from_rows(codes.astype(np.int64), x.shape, q.axis)


def quant_dequant(x, q):
    """Simulated tensor ``s * (quantize(x) + z)``, same shape as ``x``."""
    x, rows = _check(x, q)
    lo, hi = q.int_range
    out = np.empty_like(rows)
    kernels.quant_dequant_rows(
        rows, q.scale, q.zero_point.astype(np.float64), float(lo), float(hi), out, num_threads()
    )
    return np.ascontiguousarray(_from_rows(out, x.shape, q.axis))


def _shared_histograms(a, b, bins):
    """Histograms of ``a`` and ``b`` over their joint range."""
    lo = min(float(a.min()), float(b.min()))
    hi = max(float(a.max()), float(b.max()))
    try:
        return np.histogram(a, bins=bins, range=(lo, hi))[0], np.histogram(b, bins=bins, range=(lo, hi))[0]
    except ValueError:
        # range too narrow for distinct bin edges (e.g. subnormals): bin on [0, 1] instead
        w = hi - lo
        return (np.histogram((a - lo) / w, bins=bins, range=(0.0, 1.0))[0],
                np.histogram((b - lo) / w, bins=bins, range=(0.0, 1.0))[0])


def metric_distance(x_sim, x_fp, m):
    x_sim = np.asarray(x_sim, dtype=np.float64)
    x_fp = np.asarray(x_fp, dtype=np.float64)
    if x_sim.shape != x_fp.shape:
        raise DimensionError(f"shape mismatch {x_sim.shape} vs {x_fp.shape}")
    if m.kind == "lp":
        return float(np.mean(np.abs(x_sim - x_fp) ** m.p))
    if m.kind == "l1":
        return float(np.mean(np.abs(x_sim - x_fp)))
    if m.kind == "cosine":
        na = float(np.sqrt(np.sum(x_sim * x_sim)))
        nb = float(np.sqrt(np.sum(x_fp * x_fp)))
        if na == 0.0 or nb == 0.0:
            return 0.0 if na == nb else 1.0
        return 1.0 - float(np.sum(x_sim * x_fp)) / (na * nb)
    if x_fp.size == 0:
        raise InputError("KL divergence needs at least one element")
    p_fp, p_sim = _shared_histograms(x_fp, x_sim, m.bins)
    p_fp = p_fp + KL_SMOOTHING
    p_sim = p_sim + KL_SMOOTHING
    p_fp /= p_fp.sum()
    p_sim /= p_sim.sum()
    return float(np.sum(p_fp * np.log(p_fp / p_sim)))


def _range_scale(v, bits, signed, symmetric):
    """Largest candidate scale for one slice, or 0.0 when the slice is all zero."""
    lo, hi = int_range(bits, signed)
    amax = float(np.max(np.abs(v)))
    if amax == 0.0:
        return 0.0
    if symmetric:
        return amax / hi
    span = float(v.max()) - float(v.min())
    if span == 0.0:
        return amax / hi
    return span / (hi - lo)


def _zero_point(v, scale, bits, signed, symmetric):
    if symmetric:
        return 0
    lo, hi = int_range(bits, signed)
    # aligns min(v) with the lowest integer code
    z = int(np.rint(float(v.min()) / scale)) - lo
    return min(max(z, lo), hi)


def candidate_scales(v, bits, signed, cfg):
    s_max = _range_scale(v, bits, signed, cfg.symmetric)
    if s_max == 0.0:
        return np.array([1.0])
    return np.linspace(cfg.min_scale_fraction * s_max, s_max, cfg.num_candidates)


def search_scale(v, m, cfg, bits=8, signed=True):
    """Grid search on one slice. Returns ``(index, scale, zero_point)``.

    Ties go to the smallest scale. An all-zero slice yields ``(0, 1.0, 0)``.
    """
    v = np.ascontiguousarray(v, dtype=np.float64).reshape(1, -1)
    if v.size == 0:
        raise InputError("cannot fit quantization params on an empty tensor")
    if not np.all(np.isfinite(v)):
        raise InputError("quantization input contains non-finite values")
    scales = candidate_scales(v, bits, signed, cfg)
    if scales.size == 1:
        return 0, 1.0, 0
    lo, hi = int_range(bits, signed)
    out = np.empty_like(v)
    best = (None, None, None)
    best_d = np.inf
    for i, s in enumerate(scales):
        z = _zero_point(v, s, bits, signed, cfg.symmetric)
        kernels.quant_dequant_rows(
            v, np.array([s]), np.array([float(z)]), float(lo), float(hi), out, num_threads()
        )
        d = metric_distance(out, v, m)
        if d < best_d:
            best, best_d = (i, float(s), z), d
    if best[0] is None:  # every candidate gave NaN distance
        best = (len(scales) - 1, float(scales[-1]), _zero_point(v, scales[-1], bits, signed, cfg.symmetric))
    return best


def fit_params(x, m, cfg=None, bits=8, signed=True, axis=None):
    """Metric-minimizing params, searched independently per channel slice."""
    cfg = cfg or SearchConfig()
    rows = _as_rows(x, axis)
    if rows.size == 0:
        raise InputError("cannot fit quantization params on an empty tensor")
    scales, zps = [], []
    for row in rows:
        _, s, z = search_scale(row, m, cfg, bits, signed)
        scales.append(s)
        zps.append(z)
    return QuantParams(np.array(scales), np.array(zps), bits, signed, axis)


def minmax_params(x, bits=8, signed=True, symmetric=False, axis=None):
    """Uncalibrated params covering the full observed range."""
    rows = _as_rows(x, axis)
    if rows.size == 0:
        raise InputError("cannot fit quantization params on an empty tensor")
    scales, zps = [], []
    for row in rows:
        s = _range_scale(row, bits, signed, symmetric)
        if s == 0.0:
            scales.append(1.0)
            zps.append(0)
        else:
            scales.append(s)
            zps.append(_zero_point(row, s, bits, signed, symmetric))
    return QuantParams(np.array(scales), np.array(zps), bits, signed, axis)


def weight_params(w, m, cfg=None, bits=8):
    """Per-output-channel symmetric signed params for a weight matrix."""
    base = cfg or SearchConfig()
    cfg = SearchConfig(base.num_candidates, base.min_scale_fraction, symmetric=True)
    return fit_params(w, m, cfg, bits=bits, signed=True, axis=0)


def activation_params(a, m, cfg=None, bits=8):
    """Per-tensor asymmetric signed params for a pooled activation tensor."""
    base = cfg or SearchConfig()
    cfg = SearchConfig(base.num_candidates, base.min_scale_fraction, symmetric=False)
    return fit_params(a, m, cfg, bits=bits, signed=True, axis=None)
