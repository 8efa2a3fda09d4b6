"""Kernel selection: the compiled extension when importable, else the numpy fallback."""
import os

if os.environ.get("DMQUANT_PURE_PYTHON", "") not in ("", "0"):
    from dmquant import _fallback as kernels

    COMPILED = False
else:
    try:
        from dmquant import _kernels as kernels

        COMPILED = True
    except ImportError:  # extension not built
        from dmquant import _fallback as kernels

        COMPILED = False

_num_threads = None


def num_threads():
    """Thread count for parallel kernels (``DMQUANT_NUM_THREADS``, default 1)."""
    if _num_threads is not None:
        return _num_threads
    try:
        return max(1, int(os.environ.get("DMQUANT_NUM_THREADS", "1")))
    except ValueError:
        return 1


def set_num_threads(n):
    global _num_threads
    _num_threads = None if n is None else max(1, int(n))
