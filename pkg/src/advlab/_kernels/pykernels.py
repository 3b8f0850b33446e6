"""Pure-numpy fallback for the convolution kernels (im2col style)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "python"


def conv_fwd(x, w, stride):
    """Valid-padding 2-D convolution. x:[n,c,h,w], w:[f,c,kh,kw] -> [n,f,ho,wo]."""
    f, c, kh, kw = w.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_bwd_input(gy, w, stride, h, wd):
    """Adjoint of conv_fwd w.r.t. x. gy:[n,f,ho,wo] -> [n,c,h,wd]."""
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gx = np.zeros((n, c, h, wd))
    t = np.tensordot(gy, w, axes=([1], [0]))  # [n, ho, wo, c, kh, kw]
    for a in range(kh):
        for b in range(kw):
            gx[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += (
                t[..., a, b].transpose(0, 3, 1, 2))
    return gx


def conv_bwd_weight(gy, x, stride, kh, kw):
    """Adjoint of conv_fwd w.r.t. w. -> [f,c,kh,kw]."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3])))
