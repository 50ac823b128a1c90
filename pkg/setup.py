import os

import numpy
from setuptools import Extension, setup

# RIN_PURE_PYTHON=1 skips the compiled kernels; the numpy fallback is used.
ext_modules = []
if not os.environ.get("RIN_PURE_PYTHON"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "rin.kernels._ckernels",
            ["src/rin/kernels/_ckernels.pyx"],
            include_dirs=[numpy.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
    ]
    ext_modules = cythonize(extensions, language_level=3)

setup(ext_modules=ext_modules)
