"""Selects the compiled kernels when available, else the numpy fallback.

Set ``DEGENMFG_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("DEGENMFG_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def w2_sq_sorted_1d(a, b):
    return float(_impl.w2_sq_sorted_1d(np.ascontiguousarray(a, dtype=np.float64),
                                       np.ascontiguousarray(b, dtype=np.float64)))


def poly_design(y, exps):
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return _impl.poly_design(y, np.ascontiguousarray(exps, dtype=np.int_))
