"""Pure-numpy convolution kernels.

Fallback for ``_ckernels``; both modules expose the same four functions with
identical signatures and float64 semantics.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def _pad2d(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate ``x[B,Ci,H,W]`` with ``w[Co,Ci,kh,kw]``."""
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2d(x, padding)
    # windows: [B, Ci, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, Co]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, gy, stride, padding):
    kh, kw = w.shape[2], w.shape[3]
    B, Ci, H, W = x.shape
    Ho, Wo = gy.shape[2], gy.shape[3]
    xp = _pad2d(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # [Co, Ci, kh, kw]

    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w[:, :, i, j], gy, axes=([0], [1]))  # [Ci, B, Ho, Wo]
            gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += (
                contrib.transpose(1, 0, 2, 3)
            )
    gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def _temporal_windows(x, k, padding):
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (0, 0), (0, 0)))
    B, Np, C, M = x.shape
    win = sliding_window_view(x, k, axis=1)  # [B, No, C, M, k]
    No = win.shape[1]
    # -> [M, B*No, C*k] with (c, t) ordering matching w[m, o, c, t]
    cols = win.transpose(3, 0, 1, 2, 4).reshape(M, B * No, C * k)
    return cols, No


def temporal_conv_forward(x, w, padding):
    """Per-part (unshared) temporal conv: ``x[B,N,C,M]``, ``w[M,Co,Ci,k]``."""
    B = x.shape[0]
    M, Co, Ci, k = w.shape
    cols, No = _temporal_windows(x, k, padding)
    wm = w.reshape(M, Co, Ci * k).transpose(0, 2, 1)  # [M, Ci*k, Co]
    y = np.matmul(cols, wm)  # [M, B*No, Co]
    return np.ascontiguousarray(y.reshape(M, B, No, Co).transpose(1, 2, 3, 0))


def temporal_conv_backward(x, w, gy, padding):
    B, N, C, M = x.shape
    _, Co, Ci, k = w.shape
    cols, No = _temporal_windows(x, k, padding)
    gyc = gy.transpose(3, 0, 1, 2).reshape(M, B * No, Co)  # [M, B*No, Co]
    gw = np.matmul(gyc.transpose(0, 2, 1), cols).reshape(M, Co, Ci, k)

    wm = w.reshape(M, Co, Ci * k)
    gcols = np.matmul(gyc, wm).reshape(M, B, No, Ci, k)
    gxp = np.zeros((B, N + 2 * padding, C, M))
    for t in range(k):
        gxp[:, t:t + No] += gcols[:, :, :, :, t].transpose(1, 2, 3, 0)
    gx = gxp[:, padding:padding + N] if padding else gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)
