"""Build the optional Cython coordinate-descent kernel.

The package works without it (``madml._cd_py`` is used instead), so a failed
compile only prints a warning.
"""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("MADML_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "madml._cd",
                    sources=["src/madml/_cd.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"warning: building without compiled kernel ({exc})", file=sys.stderr)
        ext_modules = []

setup(ext_modules=ext_modules)
