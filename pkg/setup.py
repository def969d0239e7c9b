"""Build script: compiles the optional _kernels extension when a toolchain
is available.  The package installs and runs fine without it; knowpilot.kernels
falls back to the pure implementations at import time."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("KNOWPILOT_SKIP_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "knowpilot._kernels",
                    ["src/knowpilot/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
