"""Build script: compiles the optional fast simulator core.

The package works without the extension (a pure-Python core is selected at
import time), so a failed compile only costs speed.
"""
from setuptools import setup, Extension

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("spectype.engine._simcore", ["src/spectype/engine/_simcore.pyx"])],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"spectype: skipping compiled core ({exc}); pure-Python fallback will be used")

setup(ext_modules=ext_modules)
