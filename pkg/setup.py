from setuptools import Extension, setup
from Cython.Build import cythonize
import numpy as np

ext = Extension(
    "advlab._kernels._convext",
    sources=["src/advlab/_kernels/_convext.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-march=native"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize(ext, language_level="3"))
