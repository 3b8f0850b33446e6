"""Convolution kernel backend: compiled extension if built, numpy fallback otherwise.

Set ADVLAB_KERNELS=python to force the fallback (used by the benchmark).
"""

import os

import numpy as np

from . import pykernels

if os.environ.get("ADVLAB_KERNELS", "").lower() == "python":
    _impl = pykernels
else:
    try:
        from . import _convext as _impl
    except ImportError:
        _impl = pykernels

BACKEND = _impl.BACKEND_NAME


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_fwd(x, w, stride):
    return _impl.conv_fwd(_c64(x), _c64(w), stride)


def conv_bwd_input(gy, w, stride, h, wd):
    return _impl.conv_bwd_input(_c64(gy), _c64(w), stride, h, wd)


def conv_bwd_weight(gy, x, stride, kh, kw):
    return _impl.conv_bwd_weight(_c64(gy), _c64(x), stride, kh, kw)
