"""Build script for the optional compiled kernel extension.

The package works without the extension (pure-numpy fallback selected at
import time); building it just speeds up the hot row-wise kernels.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ttlab._kernels._speedups",
                ["src/ttlab/_kernels/_speedups.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:  # Cython unavailable: ship pure-python only
    ext_modules = []

setup(ext_modules=ext_modules)
