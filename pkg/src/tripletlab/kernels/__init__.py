"""Hot kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``TRIPLETLAB_NUMBA``:
``"1"`` forces numba, ``"0"`` forces numpy, unset means numba when it
imports cleanly.
"""
import os

import numpy as np

from . import _numpy

_flag = os.environ.get("TRIPLETLAB_NUMBA", "").strip()

if _flag == "0":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _flag == "1":
            raise
        _impl = _numpy
        BACKEND = "numpy"


def sq_dist(x, mu):
    return _impl.sq_dist(np.ascontiguousarray(x, dtype=np.float64),
                         np.ascontiguousarray(mu, dtype=np.float64))


def masked_bce(z, y, hp, hm):
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (z, y, hp, hm)]
    return _impl.masked_bce(*args)


def sigmoid(x):
    return _impl.sigmoid(np.ascontiguousarray(x, dtype=np.float64))


def average_precision(scores, labels):
    return _impl.average_precision(np.ascontiguousarray(scores, dtype=np.float64),
                                   np.ascontiguousarray(labels, dtype=np.float64))


def max_project(scores, member, n_out):
    return _impl.max_project(np.ascontiguousarray(scores, dtype=np.float64),
                             np.ascontiguousarray(member, dtype=np.int64), int(n_out))


__all__ = ["BACKEND", "sq_dist", "masked_bce", "sigmoid", "average_precision", "max_project"]
