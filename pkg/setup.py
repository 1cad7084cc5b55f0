import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("EPIPRETRAIN_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "epipretrain._ckernels",
                ["src/epipretrain/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp-simd"],
                libraries=["mvec", "m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
