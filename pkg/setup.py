import os
import sys

from setuptools import Extension, setup


def extensions():
    if os.environ.get("DMQUANT_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("Cython not found; installing pure-Python fallback only", file=sys.stderr)
        return []
    # no fused sincos: glibc's sincos can differ from sin/cos by an ulp, and the
    # fallback calls math.sin/math.cos separately
    flags = ["-O3", "-ffp-contract=off", "-fno-fast-math", "-fno-builtin-sin", "-fno-builtin-cos",
             "-fopenmp"]
    ext = Extension(
        "dmquant._kernels",
        ["src/dmquant/_kernels.pyx"],
        extra_compile_args=flags,
        extra_link_args=["-fopenmp"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
