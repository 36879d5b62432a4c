"""Build script: compiles the fast kernel extension when Cython is available.

The package works without the extension (a numpy fallback is selected at
import time), so a pure-python install is a valid degraded mode.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext = Extension(
        "amun.backends._fastcore",
        ["src/amun/backends/_fastcore.pyx"],
        include_dirs=[np.get_include()],
        # -ffp-contract=off keeps IEEE semantics so reruns are bit-stable
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
