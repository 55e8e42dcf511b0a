import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("HIMOSA_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        import scipy  # noqa: F401  (cython_blas declarations)
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "himosa._kernels._ckernels",
                    ["src/himosa/_kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
