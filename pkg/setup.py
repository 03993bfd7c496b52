import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TTKIT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "ttkit._kernels",
                    ["src/ttkit/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
