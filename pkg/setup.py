import os

from setuptools import Extension, setup

# The compiled kernels are an optimization, not a requirement: the package
# falls back to the numpy implementation when the extension is absent.
ext_modules = []
if os.environ.get("XCRYONET_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "xcryonet.diffcore._convkernels",
                    ["src/xcryonet/diffcore/_convkernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
