"""Pure-Python/numpy twins of the compiled kernels.

Selected when the extension is unavailable or ``DMQUANT_PURE_PYTHON=1``.
Results are bit-identical to ``_kernels``: same operation order, same libm calls.
"""
import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_MULT = 6364136223846793005
_TWO_PI = 6.283185307179586
_INV_2_32 = 1.0 / 4294967296.0


def _step(state, inc):
    new = (state * _MULT + inc) & _MASK64
    xorshifted = (((state >> 18) ^ state) >> 27) & 0xFFFFFFFF
    rot = state >> 59
    return new, ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF


def pcg32_fill(state, inc, out):
    for i in range(out.shape[0]):
        state, out[i] = _step(state, inc)
    return state


def pcg32_normals(state, inc, has_pending, pending, out):
    n = out.shape[0]
    i = 0
    if n > 0 and has_pending:
        out[0] = pending
        has_pending = False
        i = 1
    while i < n:
        state, x1 = _step(state, inc)
        state, x2 = _step(state, inc)
        u1 = (float(x1) + 1.0) * _INV_2_32
        u2 = (float(x2) + 1.0) * _INV_2_32
        r = math.sqrt(-2.0 * math.log(u1))
        theta = _TWO_PI * u2
        out[i] = r * math.cos(theta)
        if i + 1 < n:
            out[i + 1] = r * math.sin(theta)
        else:
            pending = r * math.sin(theta)
            has_pending = True
        i += 2
    return state, has_pending, pending


def matmul(a, b, out, num_threads=1):
    # outer-product accumulation keeps the per-element sum in ascending k
    out[...] = 0.0
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]


def quant_dequant_rows(x, scale, zero_point, pmin, pmax, out, num_threads=1):
    s = np.asarray(scale)[:, None]
    z = np.asarray(zero_point)[:, None]
    q = np.rint(x / s) - z
    np.clip(q, pmin, pmax, out=q)
    out[...] = s * (q + z)
