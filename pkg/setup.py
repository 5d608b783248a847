import os
import platform

import numpy as np
from setuptools import Extension, setup

# no -ffast-math: the kernels test for inf and rely on evaluation order
CFLAGS = ["-O3", "-fno-math-errno", "-fno-trapping-math"]
# the exp loops only beat numpy's SIMD exp with wide vectors; set
# OTODE_PORTABLE=1 when building a wheel for other machines
if not os.environ.get("OTODE_PORTABLE") and platform.machine() in ("x86_64", "AMD64"):
    CFLAGS.append("-march=native")

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "otode._ckernels",
                ["src/otode/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=CFLAGS,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
