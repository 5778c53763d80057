"""Build the optional Cython kernel; the package falls back to torch ops without it."""
import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - pure-Python install
    cythonize = None

EXT_MODULES = []
if cythonize is not None and os.environ.get("IMED_NO_EXT") != "1":
    EXT_MODULES = cythonize(
        [
            Extension(
                "imed._grouped",
                [os.path.join("src", "imed", "_grouped.pyx")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3, "embedsignature": True},
    )

setup(ext_modules=EXT_MODULES)
