# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (float64, fixed loop order).

Mirrors ``_pykernels``: same functions, same argument conventions.
"""

import numpy as np

NAME = "cython"

# multiply-adds per output element above which the unfold + BLAS path beats
# the direct loops (measured with benchmarks/bench_kernels.py)
GEMM_THRESHOLD = 64


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride) noexcept nogil:
    # smallest output index o with o*stride + off - pad >= 0
    cdef Py_ssize_t d = pad - off
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t size, Py_ssize_t n_out) noexcept nogil:
    # one past the largest output index o with o*stride + off - pad <= size - 1
    cdef Py_ssize_t d = size - 1 + pad - off
    if d < 0:
        return 0
    cdef Py_ssize_t h = d // stride + 1
    return h if h < n_out else n_out


def _conv2d_forward_direct(x, w, Py_ssize_t stride, Py_ssize_t padding):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    y = np.zeros((B, Co, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t b, co, ci, i, j, oh, ow, ih, oh0, oh1, ow0, ow1, iw0
    cdef double wt
    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for i in range(kh):
                        oh0 = _lo(i, padding, stride)
                        oh1 = _hi(i, padding, stride, H, Ho)
                        for j in range(kw):
                            wt = wv[co, ci, i, j]
                            ow0 = _lo(j, padding, stride)
                            ow1 = _hi(j, padding, stride, W, Wo)
                            for oh in range(oh0, oh1):
                                ih = oh * stride + i - padding
                                iw0 = j - padding
                                for ow in range(ow0, ow1):
                                    yv[b, co, oh, ow] += wt * xv[b, ci, ih, ow * stride + iw0]
    return y


def _conv2d_backward_direct(x, w, gy, Py_ssize_t stride, Py_ssize_t padding):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = gv.shape[2], Wo = gv.shape[3]
    gx = np.zeros((B, Ci, H, W), dtype=np.float64)
    gw = np.zeros((Co, Ci, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw
    cdef Py_ssize_t b, co, ci, i, j, oh, ow, ih, iw, oh0, oh1, ow0, ow1
    cdef double wt, acc, g
    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for i in range(kh):
                        oh0 = _lo(i, padding, stride)
                        oh1 = _hi(i, padding, stride, H, Ho)
                        for j in range(kw):
                            wt = wv[co, ci, i, j]
                            ow0 = _lo(j, padding, stride)
                            ow1 = _hi(j, padding, stride, W, Wo)
                            acc = 0.0
                            for oh in range(oh0, oh1):
                                ih = oh * stride + i - padding
                                for ow in range(ow0, ow1):
                                    iw = ow * stride + j - padding
                                    g = gv[b, co, oh, ow]
                                    acc = acc + g * xv[b, ci, ih, iw]
                                    gxv[b, ci, ih, iw] += wt * g
                            gwv[co, ci, i, j] += acc
    return gx, gw


def _temporal_forward_direct(x, w, Py_ssize_t padding):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    # [k, Co, Ci, M] so the innermost part loop is contiguous
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(
        np.asarray(w, dtype=np.float64).transpose(3, 1, 2, 0))
    cdef Py_ssize_t B = xv.shape[0], N = xv.shape[1], Ci = xv.shape[2], M = xv.shape[3]
    cdef Py_ssize_t k = wv.shape[0], Co = wv.shape[1]
    cdef Py_ssize_t No = N + 2 * padding - k + 1
    y = np.zeros((B, No, Co, M), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t b, n, t, o, c, m, nin
    with nogil:
        for b in range(B):
            for n in range(No):
                for t in range(k):
                    nin = n + t - padding
                    if nin < 0 or nin >= N:
                        continue
                    for o in range(Co):
                        for c in range(Ci):
                            for m in range(M):
                                yv[b, n, o, m] += wv[t, o, c, m] * xv[b, nin, c, m]
    return y


def _temporal_backward_direct(x, w, gy, Py_ssize_t padding):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(
        np.asarray(w, dtype=np.float64).transpose(3, 1, 2, 0))
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], N = xv.shape[1], Ci = xv.shape[2], M = xv.shape[3]
    cdef Py_ssize_t k = wv.shape[0], Co = wv.shape[1]
    cdef Py_ssize_t No = gv.shape[1]
    gx = np.zeros((B, N, Ci, M), dtype=np.float64)
    gwt = np.zeros((k, Co, Ci, M), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gwt
    cdef Py_ssize_t b, n, t, o, c, m, nin
    cdef double g
    with nogil:
        for b in range(B):
            for n in range(No):
                for t in range(k):
                    nin = n + t - padding
                    if nin < 0 or nin >= N:
                        continue
                    for o in range(Co):
                        for c in range(Ci):
                            for m in range(M):
                                g = gv[b, n, o, m]
                                gxv[b, nin, c, m] += wv[t, o, c, m] * g
                                gwv[t, o, c, m] += g * xv[b, nin, c, m]
    return gx, np.ascontiguousarray(gwt.transpose(3, 1, 2, 0))


# --------------------------------------------------------------------------
# unfold / fold in C, contraction through BLAS


def _unfold2d(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t padding,
              Py_ssize_t Ho, Py_ssize_t Wo):
    """``x[B,Ci,H,W]`` -> ``cols[B, Ho*Wo, Ci*kh*kw]`` (zeros where the window hits padding)."""
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cols = np.zeros((B, Ho * Wo, Ci * kh * kw), dtype=np.float64)
    cdef double[:, :, ::1] cv = cols
    cdef Py_ssize_t b, ci, i, j, oh, ow, ih, iw, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for ci in range(Ci):
                        for i in range(kh):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            col = (ci * kh + i) * kw
                            for j in range(kw):
                                iw = ow * stride + j - padding
                                if 0 <= iw < W:
                                    cv[b, oh * Wo + ow, col + j] = xv[b, ci, ih, iw]
    return cols


def _fold2d(gcols, Py_ssize_t Ci, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw,
            Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t Ho, Py_ssize_t Wo):
    """Adjoint of ``_unfold2d``: scatter-add ``gcols`` back onto ``[B,Ci,H,W]``."""
    cdef double[:, :, ::1] gv = gcols
    cdef Py_ssize_t B = gv.shape[0]
    gx = np.zeros((B, Ci, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t b, ci, i, j, oh, ow, ih, iw, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for ci in range(Ci):
                        for i in range(kh):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            col = (ci * kh + i) * kw
                            for j in range(kw):
                                iw = ow * stride + j - padding
                                if 0 <= iw < W:
                                    gxv[b, ci, ih, iw] += gv[b, oh * Wo + ow, col + j]
    return gx


def conv2d_forward(x, w, Py_ssize_t stride, Py_ssize_t padding):
    """Cross-correlate ``x[B,Ci,H,W]`` with ``w[Co,Ci,kh,kw]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    Co, Ci, kh, kw = w.shape
    if Ci * kh * kw < GEMM_THRESHOLD:
        return _conv2d_forward_direct(x, w, stride, padding)
    B, _, H, W = x.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    cols = _unfold2d(x, kh, kw, stride, padding, Ho, Wo)
    y = np.matmul(cols, w.reshape(Co, -1).T)  # [B, Ho*Wo, Co]
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(B, Co, Ho, Wo)


def conv2d_backward(x, w, gy, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    Co, Ci, kh, kw = w.shape
    if Ci * kh * kw < GEMM_THRESHOLD:
        return _conv2d_backward_direct(x, w, gy, stride, padding)
    B, _, H, W = x.shape
    Ho, Wo = gy.shape[2], gy.shape[3]
    cols = _unfold2d(x, kh, kw, stride, padding, Ho, Wo)
    g2 = gy.reshape(B, Co, Ho * Wo)
    gw = np.tensordot(g2, cols, axes=([0, 2], [0, 1])).reshape(Co, Ci, kh, kw)
    gcols = np.ascontiguousarray(np.matmul(g2.transpose(0, 2, 1), w.reshape(Co, -1)))
    return _fold2d(gcols, Ci, H, W, kh, kw, stride, padding, Ho, Wo), gw


def _unfold_t(x, Py_ssize_t k, Py_ssize_t padding, Py_ssize_t No):
    """``x[B,N,C,M]`` -> ``cols[M, B*No, C*k]`` with (c, t) column order."""
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], N = xv.shape[1], C = xv.shape[2], M = xv.shape[3]
    cols = np.zeros((M, B * No, C * k), dtype=np.float64)
    cdef double[:, :, ::1] cv = cols
    cdef Py_ssize_t b, n, t, c, m, nin
    with nogil:
        for m in range(M):
            for b in range(B):
                for n in range(No):
                    for c in range(C):
                        for t in range(k):
                            nin = n + t - padding
                            if 0 <= nin < N:
                                cv[m, b * No + n, c * k + t] = xv[b, nin, c, m]
    return cols


def _fold_t(gcols, Py_ssize_t B, Py_ssize_t N, Py_ssize_t C, Py_ssize_t k, Py_ssize_t padding,
            Py_ssize_t No):
    cdef double[:, :, ::1] gv = gcols
    cdef Py_ssize_t M = gv.shape[0]
    gx = np.zeros((B, N, C, M), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t b, n, t, c, m, nin
    with nogil:
        for b in range(B):
            for n in range(No):
                for t in range(k):
                    nin = n + t - padding
                    if nin < 0 or nin >= N:
                        continue
                    for c in range(C):
                        for m in range(M):
                            gxv[b, nin, c, m] += gv[m, b * No + n, c * k + t]
    return gx


def temporal_conv_forward(x, w, Py_ssize_t padding):
    """Per-part (unshared) temporal conv: ``x[B,N,C,M]``, ``w[M,Co,Ci,k]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    M, Co, Ci, k = w.shape
    if Ci * k < GEMM_THRESHOLD:
        return _temporal_forward_direct(x, w, padding)
    B, N = x.shape[0], x.shape[1]
    No = N + 2 * padding - k + 1
    cols = _unfold_t(x, k, padding, No)
    y = np.matmul(cols, np.ascontiguousarray(w.reshape(M, Co, Ci * k).transpose(0, 2, 1)))  # [M, B*No, Co]
    return np.ascontiguousarray(y.reshape(M, B, No, Co).transpose(1, 2, 3, 0))


def temporal_conv_backward(x, w, gy, Py_ssize_t padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    M, Co, Ci, k = w.shape
    if Ci * k < GEMM_THRESHOLD:
        return _temporal_backward_direct(x, w, gy, padding)
    B, N = x.shape[0], x.shape[1]
    No = gy.shape[1]
    cols = _unfold_t(x, k, padding, No)
    gyc = np.ascontiguousarray(np.asarray(gy, dtype=np.float64).transpose(3, 0, 1, 2)).reshape(M, B * No, Co)
    gw = np.matmul(np.ascontiguousarray(gyc.transpose(0, 2, 1)), cols).reshape(M, Co, Ci, k)
    gcols = np.ascontiguousarray(np.matmul(gyc, w.reshape(M, Co, Ci * k)))
    return _fold_t(gcols, B, N, Ci, k, padding, No), gw
