# cython: language_level=3
"""Compiled kernels: depthwise conv, pooling, batch-norm training, ReLU6 mask.

Mirrors ``_kernels_py`` exactly in semantics (zero padding, first-max tie
rule); only the loop structure differs.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def dwconv3_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, h, v, i, j, hh, vv
    cdef floating acc
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    for v in range(W):
                        acc = 0
                        for i in range(3):
                            hh = h + i - 1
                            if hh < 0 or hh >= H:
                                continue
                            for j in range(3):
                                vv = v + j - 1
                                if vv < 0 or vv >= W:
                                    continue
                                acc = acc + w[c, i, j] * x[b, c, hh, vv]
                        y[b, c, h, v] = acc
    return out


def dwconv3_backward_input(floating[:, :, :, ::1] gy, floating[:, :, ::1] w):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    cdef Py_ssize_t b, c, h, v, i, j, hh, vv
    cdef floating acc
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    for v in range(W):
                        acc = 0
                        for i in range(3):
                            hh = h - i + 1
                            if hh < 0 or hh >= H:
                                continue
                            for j in range(3):
                                vv = v - j + 1
                                if vv < 0 or vv >= W:
                                    continue
                                acc = acc + w[c, i, j] * gy[b, c, hh, vv]
                        gx[b, c, h, v] = acc
    return out


def dwconv3_backward_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, h, v, i, j, h0, h1, v0, v1
    cdef floating acc
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((C, 3, 3), dtype=dtype)
    cdef floating[:, :, ::1] gw = out
    with nogil:
        for c in range(C):
            for i in range(3):
                h0 = 1 if i == 0 else 0
                h1 = H - 1 if i == 2 else H
                for j in range(3):
                    v0 = 1 if j == 0 else 0
                    v1 = W - 1 if j == 2 else W
                    acc = 0
                    for b in range(B):
                        for h in range(h0, h1):
                            for v in range(v0, v1):
                                acc = acc + x[b, c, h + i - 1, v + j - 1] * gy[b, c, h, v]
                    gw[c, i, j] = acc
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    cdef Py_ssize_t b, c, h, v, k
    cdef floating best, cand
    cdef unsigned char arg
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((B, C, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    cdef floating[:, :, :, ::1] y = out
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(Ho):
                    for v in range(Wo):
                        best = x[b, c, 2 * h, 2 * v]
                        arg = 0
                        for k in range(1, 4):
                            cand = x[b, c, 2 * h + k // 2, 2 * v + k % 2]
                            if cand > best:
                                best = cand
                                arg = <unsigned char>k
                        y[b, c, h, v] = best
                        idx[b, c, h, v] = arg
    return out, idx_arr


def maxpool2_backward(floating[:, :, :, ::1] gy, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t b, c, h, v, k
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(Ho):
                    for v in range(Wo):
                        k = idx[b, c, h, v]
                        gx[b, c, 2 * h + k // 2, 2 * v + k % 2] = gy[b, c, h, v]
    return out


def bn_train_forward(floating[:, :, :, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    """Batch-statistics BN. Returns ``(y, xhat, mean, var, inv_std)``."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, h, v
    cdef double n = <double>(B * H * W), s, d, m, inv
    cdef floating g, bt, xh
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty((B, C, H, W), dtype=dtype)
    xh_arr = np.empty((B, C, H, W), dtype=dtype)
    mean_arr = np.empty(C, dtype=np.float64)
    var_arr = np.empty(C, dtype=np.float64)
    inv_arr = np.empty(C, dtype=np.float64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef floating[:, :, :, ::1] xhat = xh_arr
    cdef double[::1] mean = mean_arr, var = var_arr, invs = inv_arr
    with nogil:
        for c in range(C):
            s = 0.0
            for b in range(B):
                for h in range(H):
                    for v in range(W):
                        s = s + x[b, c, h, v]
            m = s / n
            s = 0.0
            for b in range(B):
                for h in range(H):
                    for v in range(W):
                        d = x[b, c, h, v] - m
                        s = s + d * d
            mean[c] = m
            var[c] = s / n
            inv = 1.0 / (var[c] + eps) ** 0.5
            invs[c] = inv
            g = gamma[c]
            bt = beta[c]
            for b in range(B):
                for h in range(H):
                    for v in range(W):
                        xh = <floating>((x[b, c, h, v] - m) * inv)
                        xhat[b, c, h, v] = xh
                        y[b, c, h, v] = xh * g + bt
    return y_arr, xh_arr, mean_arr, var_arr, inv_arr


def bn_train_backward(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] xhat,
                      floating[::1] gamma, double[::1] inv_std):
    """Gradient of batch-statistics BN. Returns ``(gx, ggamma, gbeta)``."""
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    cdef Py_ssize_t b, c, h, v
    cdef double n = <double>(B * H * W), sg, sgx, scale, mg, mgx
    dtype = np.float64 if floating is double else np.float32
    gx_arr = np.empty((B, C, H, W), dtype=dtype)
    gg_arr = np.empty(C, dtype=dtype)
    gb_arr = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[::1] gg = gg_arr, gbt = gb_arr
    with nogil:
        for c in range(C):
            sg = 0.0
            sgx = 0.0
            for b in range(B):
                for h in range(H):
                    for v in range(W):
                        sg = sg + gy[b, c, h, v]
                        sgx = sgx + gy[b, c, h, v] * xhat[b, c, h, v]
            gbt[c] = <floating>sg
            gg[c] = <floating>sgx
            scale = gamma[c] * inv_std[c]
            mg = sg / n
            mgx = sgx / n
            for b in range(B):
                for h in range(H):
                    for v in range(W):
                        gx[b, c, h, v] = <floating>(scale * (gy[b, c, h, v] - mg - xhat[b, c, h, v] * mgx))
    return gx_arr, gg_arr, gb_arr


def relu6_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, h, v
    cdef floating xv
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    for v in range(W):
                        xv = x[b, c, h, v]
                        # branch-free: the mask is unpredictable on real activations
                        gx[b, c, h, v] = gy[b, c, h, v] * ((xv > 0) & (xv < 6))
    return out
