from setuptools import Extension, setup
from Cython.Build import cythonize

# The extension is optional: without a C toolchain the package still works on
# the numpy reference kernels, just slower.
ext = Extension(
    "voxseed._kernels",
    sources=["src/voxseed/_kernels.pyx", "src/voxseed/convkernels.c"],
    include_dirs=["src/voxseed"],
    extra_compile_args=["-O3", "-march=native", "-fopenmp"],
    extra_link_args=["-fopenmp"],
    optional=True,
)

setup(ext_modules=cythonize([ext], language_level="3"))
