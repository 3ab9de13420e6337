"""Pure-numpy implementations of the hot kernels.

Same signatures and tie-breaking rules as the compiled ``_kernels`` module;
selected automatically when the extension is not built.
"""
import numpy as np


def dwconv3_forward(x, w):
    """Depthwise 3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is (B, C, H, W), ``w`` is (C, 3, 3). Returns a new (B, C, H, W) array.
    """
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    y = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            y += w[None, :, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    return y


def dwconv3_backward_input(gy, w):
    B, C, H, W = gy.shape
    gp = np.zeros((B, C, H + 2, W + 2), dtype=gy.dtype)
    gp[:, :, 1:-1, 1:-1] = gy
    gx = np.zeros_like(gy)
    # transposed correlation: flip the kernel
    for i in range(3):
        for j in range(3):
            gx += w[None, :, 2 - i, 2 - j, None, None] * gp[:, :, i:i + H, j:j + W]
    return gx


def dwconv3_backward_weight(x, gy):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    gw = np.empty((C, 3, 3), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            gw[:, i, j] = np.einsum("bchw,bchw->c", xp[:, :, i:i + H, j:j + W], gy)
    return gw


def maxpool2_forward(x):
    """2x2/stride-2 max pooling.

    Returns ``(y, idx)`` where ``idx`` (uint8) holds the row-major position of
    the winner inside each window; ties go to the first maximum.
    """
    B, C, H, W = x.shape
    win = (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx):
    B, C, Ho, Wo = gy.shape
    win = np.zeros((B, C, Ho, Wo, 4), dtype=gy.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * 2, Wo * 2)
    )


def bn_train_forward(x, gamma, beta, eps):
    """Batch-statistics BN. Returns ``(y, xhat, mean, var, inv_std)``."""
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None].astype(x.dtype)) * inv[None, :, None, None].astype(x.dtype)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, mean.astype(np.float64), var.astype(np.float64), inv.astype(np.float64)


def bn_train_backward(gy, xhat, gamma, inv_std):
    n = gy.shape[0] * gy.shape[2] * gy.shape[3]
    gbeta = gy.sum(axis=(0, 2, 3))
    ggamma = np.einsum("bchw,bchw->c", gy, xhat)
    scale = (gamma * inv_std).astype(gy.dtype)[None, :, None, None]
    gx = scale * (
        gy - (gbeta / n)[None, :, None, None] - xhat * (ggamma / n)[None, :, None, None]
    )
    return gx, ggamma, gbeta


def relu6_backward(x, gy):
    return gy * ((x > 0) & (x < 6))
