"""Build script for the optional compiled kernels.

Project metadata lives in pyproject.toml.  The extension is skipped (and the
pure-Python kernels are used) when Cython or a C compiler is unavailable, or
when MPGUIDE_NO_EXT=1 is set.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, headers missing, ...
            print(f"warning: compiled kernels not built ({exc}); using the Python fallback",
                  file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using the Python fallback",
                  file=sys.stderr)


def extensions():
    if os.environ.get("MPGUIDE_NO_EXT") == "1":
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    # No -ffast-math / -march=native: the kernels must round exactly like the
    # Python reference so both backends give identical results.
    ext = Extension(
        "mpguide._core",
        ["src/mpguide/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
