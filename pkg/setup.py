import os

from setuptools import setup

ext_modules = []
if not os.environ.get("INTACTLAB_PURE"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        # no Cython: install the pure-Python fallback only
        pass
    else:
        ext_modules = cythonize(
            [Extension(
                "intactlab._kernels",
                ["src/intactlab/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no contraction: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
