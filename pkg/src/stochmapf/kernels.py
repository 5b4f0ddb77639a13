"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``STOCHMAPF_PURE_PYTHON=1`` to force the fallback.
"""
import os

BACKEND = "python"
if os.environ.get("STOCHMAPF_PURE_PYTHON") != "1":
    try:
        from ._kernels import first_violations
        BACKEND = "cython"
    except ImportError:
        pass
if BACKEND == "python":
    from ._kernels_py import first_violations

from . import _kernels_py as python_kernels

__all__ = ["BACKEND", "first_violations", "python_kernels"]
