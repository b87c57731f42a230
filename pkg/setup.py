"""Build script. The Cython speedup extension is optional: when Cython or a C
compiler is unavailable the package installs with the pure-numpy backend."""

from setuptools import setup


def _ext_modules():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "sgsynth._kernels._core",
            sources=["src/sgsynth/_kernels/_core.pyx"],
            include_dirs=[numpy.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        return cythonize([ext], language_level=3)
    except Exception:
        return []


try:
    setup(ext_modules=_ext_modules())
except SystemExit:
    raise
except Exception:
    # C toolchain broken: install pure Python.
    setup(ext_modules=[])
