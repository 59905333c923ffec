"""Build script for the compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time), but training is considerably faster with it:

    python setup.py build_ext --inplace
"""
import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3", "-ffast-math"]
link_args = ["-lm"]
if os.environ.get("LSR_PORTABLE") != "1":
    compile_args.append("-march=native")
    # glibc's vectorized libm (expf/tanhf) is emitted under -ffast-math
    link_args.insert(0, "-lmvec")

extensions = [
    Extension(
        "lsrec._kernels._ext",
        ["src/lsrec/_kernels/_ext.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
