"""Dense float64 arithmetic and the PCG32 random stream everything else draws from.

Tensors are plain C-contiguous ``numpy.float64`` arrays. The two pieces that
need a fixed evaluation order (matrix products and random draws) go through the
kernels selected in :mod:`dmquant._backend`.
"""
import json
import math

import numpy as np

from dmquant._backend import kernels, num_threads

PCG_MULTIPLIER = 6364136223846793005
DEFAULT_STREAM = 54
_MASK64 = 0xFFFFFFFFFFFFFFFF


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """An argument is outside the operation's domain."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product with a fixed ascending-index reduction order.

    The result does not depend on the thread count.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    kernels.matmul(a, b, out, num_threads())
    return out


def box_muller(u1, u2):
    """Map two uniforms in (0, 1] to a pair of independent standard normals."""
    r = math.sqrt(-2.0 * math.log(u1))
    theta = 6.283185307179586 * u2
    return r * math.cos(theta), r * math.sin(theta)


class Rng:
    """PCG32 (XSH-RR) generator with Box-Muller normals.

    Seeding follows the reference ``pcg32_srandom``: the increment is
    ``2 * stream + 1``; the state is zeroed, stepped, offset by ``seed`` and
    stepped again. Two generators with equal ``(seed, stream)`` produce the same
    stream everywhere.
    """

    def __init__(self, seed, stream=DEFAULT_STREAM):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream)
        self.inc = ((self.stream << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + self.seed) & _MASK64
        self._step()
        self.pending_gaussian = None
        self.draws = 0

    def _step(self):
        self.state = (self.state * PCG_MULTIPLIER + self.inc) & _MASK64

    def spawn(self, index):
        """Independent stream for parallel work item ``index``."""
        return Rng(self.seed, stream=self.stream + 1 + int(index))

    def u32(self, n):
        out = np.empty(int(n), dtype=np.uint32)
        self.state = int(kernels.pcg32_fill(self.state, self.inc, out))
        self.draws += int(n)
        return out

    def next_u32(self):
        return int(self.u32(1)[0])

    def uniform(self, n):
        """Uniforms on (0, 1]: ``(x + 1) / 2**32``."""
        return (self.u32(n).astype(np.float64) + 1.0) * (1.0 / 4294967296.0)

    def integers(self, high, n):
        """Integers uniform on ``[0, high)`` by the multiply-shift map."""
        if not 1 <= high <= 0xFFFFFFFF:
            raise InputError(f"high must be in [1, 2**32), got {high}")
        x = self.u32(n).astype(np.uint64)
        return ((x * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def normal(self, size):
        """Standard normals, filled in row-major order; ``size`` is an int or a shape."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        out = np.empty(count, dtype=np.float64)
        has_pending = self.pending_gaussian is not None
        pending = self.pending_gaussian if has_pending else 0.0
        fresh = count - (1 if has_pending and count > 0 else 0)
        state, has_pending, pending = kernels.pcg32_normals(
            self.state, self.inc, has_pending, pending, out
        )
        self.state = int(state)
        self.pending_gaussian = float(pending) if has_pending else None
        self.draws += 2 * ((fresh + 1) // 2)
        return out.reshape(shape)

    def standard_normal(self):
        return float(self.normal(1)[0])

    @classmethod
    def from_snapshot(cls, snap):
        rng = cls(snap["seed"], snap["stream"])
        rng.state = int(snap["state"])
        rng.pending_gaussian = snap.get("pending_gaussian")
        return rng

    def snapshot(self):
        return {
            "seed": self.seed,
            "stream": self.stream,
            "state": self.state,
            "pending_gaussian": self.pending_gaussian,
        }


def write_tensor(fh, x):
    """Write one tensor: a JSON header line with the shape, then little-endian float64 data."""
    x = as_tensor(x)
    header = json.dumps({"shape": list(x.shape), "dtype": "<f8"})
    fh.write(header.encode("ascii") + b"\n")
    fh.write(x.astype("<f8").tobytes())


def read_tensor(fh):
    line = fh.readline()
    if not line:
        raise InputError("unexpected end of file while reading tensor header")
    try:
        header = json.loads(line)
        shape = tuple(int(d) for d in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed tensor header: {line[:80]!r}") from exc
    count = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise InputError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
