"""Build the optional Cython kernel extension.

If Cython or a C compiler is missing the package still installs; the numpy
kernels in ``skynas.tensor._kernels_py`` are used instead.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SKYNAS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "skynas.tensor._kernels",
                    ["src/skynas/tensor/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
