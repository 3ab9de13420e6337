"""Forward and backward kernels for the SkyNet layer vocabulary.

Tensors are plain numpy arrays in (batch, channels, height, width) layout.
Every ``*_backward`` takes the cached forward inputs plus the upstream
gradient and returns gradients for inputs and parameters.
"""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes do not compose."""


DEPTHWISE = "dw3"
POINTWISE = "pw1"


@dataclass(frozen=True)
class ConvWeights:
    """Weights of a depthwise 3x3 (``C x 3 x 3``) or pointwise (``Cout x Cin``) conv."""

    kind: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == DEPTHWISE:
            if self.weight.ndim != 3 or self.weight.shape[1:] != (3, 3):
                raise ShapeError(f"depthwise kernel must be C x 3 x 3, got {self.weight.shape}")
        elif self.kind == POINTWISE:
            if self.weight.ndim != 2:
                raise ShapeError(f"pointwise kernel must be Cout x Cin, got {self.weight.shape}")
        else:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if self.bias is not None and self.bias.shape != (self.cout,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match Cout={self.cout}")

    @property
    def cin(self) -> int:
        return self.weight.shape[0] if self.kind == DEPTHWISE else self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ShapeError(f"BN {name} shape {getattr(self, name).shape} != gamma shape {n}")
        if self.eps <= 0:
            raise ValueError("BN epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("BN running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels, dtype=np.float64, eps=1e-5):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            eps=eps,
        )


def _check_4d(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (B, C, H, W), got shape {x.shape}")


def _contig(a):
    return np.ascontiguousarray(a)


# --- depthwise 3x3 -----------------------------------------------------------

def dwconv3_forward(x, w: ConvWeights):
    _check_4d(x)
    if w.kind != DEPTHWISE:
        raise ShapeError(f"expected depthwise weights, got kind {w.kind!r}")
    if x.shape[1] != w.weight.shape[0]:
        raise ShapeError(
            f"dwconv3 channel mismatch: input shape {x.shape} vs kernel shape {w.weight.shape}"
        )
    y = kernels.dwconv3_forward(_contig(x), _contig(w.weight.astype(x.dtype, copy=False)))
    if w.bias is not None:
        y += w.bias[None, :, None, None]
    return y


def dwconv3_backward(x, w: ConvWeights, gy):
    gy = _contig(gy)
    gx = kernels.dwconv3_backward_input(gy, _contig(w.weight.astype(gy.dtype, copy=False)))
    gw = kernels.dwconv3_backward_weight(_contig(x), gy)
    gb = gy.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return gx, gw, gb


# --- pointwise 1x1 -----------------------------------------------------------

def pwconv1_forward(x, w: ConvWeights):
    _check_4d(x)
    if w.kind != POINTWISE:
        raise ShapeError(f"expected pointwise weights, got kind {w.kind!r}")
    B, C, H, W = x.shape
    if C != w.cin:
        raise ShapeError(
            f"pwconv1 channel mismatch: input shape {x.shape} vs weight shape {w.weight.shape}"
        )
    y = np.matmul(w.weight.astype(x.dtype, copy=False), x.reshape(B, C, H * W))
    y = y.reshape(B, w.cout, H, W)
    if w.bias is not None:
        y += w.bias[None, :, None, None]
    return y


def pwconv1_backward(x, w: ConvWeights, gy):
    B, C, H, W = x.shape
    g = gy.reshape(B, w.cout, H * W)
    xf = x.reshape(B, C, H * W)
    gx = np.matmul(w.weight.T.astype(gy.dtype, copy=False), g).reshape(B, C, H, W)
    gw = np.tensordot(g, xf, axes=([0, 2], [0, 2]))
    gb = gy.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return gx, gw, gb


# --- batch normalization -----------------------------------------------------

def bn_forward(x, p: BnParams, mode="infer"):
    """Batch norm over (B, H, W) per channel.

    Returns ``(y, params, cache)``. In ``train`` mode batch statistics are used
    and ``params`` carries updated running statistics (the input is never
    mutated); in ``infer`` mode ``params`` is ``p`` itself.
    """
    _check_4d(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"bn channel mismatch: input shape {x.shape} vs {p.channels} BN channels")
    g = p.gamma[None, :, None, None]
    b = p.beta[None, :, None, None]
    if mode == "infer":
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean[None, :, None, None]) * inv[None, :, None, None]
        return xhat * g + b, p, ("infer", xhat, inv)
    if mode != "train":
        raise ValueError(f"bn mode must be 'train' or 'infer', got {mode!r}")
    y, xhat, mean, var, inv = kernels.bn_train_forward(
        _contig(x), _contig(p.gamma.astype(x.dtype)), _contig(p.beta.astype(x.dtype)), float(p.eps)
    )
    n = x.shape[0] * x.shape[2] * x.shape[3]
    unbiased = var * (n / (n - 1)) if n > 1 else var
    m = p.momentum
    updated = replace(
        p,
        running_mean=(1 - m) * p.running_mean + m * mean,
        running_var=(1 - m) * p.running_var + m * unbiased,
    )
    return y, updated, ("train", xhat, inv)


def bn_backward(cache, p: BnParams, gy):
    mode, xhat, inv = cache
    if mode == "train":
        return kernels.bn_train_backward(
            _contig(gy), xhat, _contig(p.gamma.astype(gy.dtype)), _contig(np.asarray(inv, np.float64))
        )
    ggamma = np.einsum("bchw,bchw->c", gy, xhat)
    gbeta = gy.sum(axis=(0, 2, 3))
    gx = gy * (p.gamma * inv)[None, :, None, None]
    return gx, ggamma, gbeta


# --- activations -------------------------------------------------------------

def relu6_forward(x):
    return np.clip(x, 0.0, 6.0)


def relu6_backward(x, gy):
    if x.ndim == 4:
        return kernels.relu6_backward(_contig(x), _contig(gy))
    shape = x.shape
    flat = lambda a: _contig(a).reshape(1, 1, 1, -1)
    return kernels.relu6_backward(flat(x), flat(gy)).reshape(shape)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return gy * (x > 0)


# --- pooling and reordering --------------------------------------------------

def _check_even(x, op):
    _check_4d(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op} needs even spatial dims, got shape {x.shape}")


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns ``(y, argmax)``."""
    _check_even(x, "maxpool2")
    return kernels.maxpool2_forward(_contig(x))


def maxpool2_backward(argmax, gy):
    return kernels.maxpool2_backward(_contig(gy), argmax)


def reorder_forward(x):
    """Space-to-depth: (B, C, H, W) -> (B, 4C, H/2, W/2), lossless.

    Output channel ``(2*dy + dx) * C + c`` holds ``x[:, c, dy::2, dx::2]``:
    sub-pixel offsets in row-major order are the major index, the original
    channel the minor one. For a single 2x2 block ``[[a, b], [c, d]]`` the four
    output channels are ``a, b, c, d``.
    """
    _check_even(x, "reorder")
    B, C, H, W = x.shape
    y = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(y).reshape(B, 4 * C, H // 2, W // 2)


def inverse_reorder(y):
    _check_4d(y)
    B, C4, Ho, Wo = y.shape
    if C4 % 4:
        raise ShapeError(f"inverse_reorder needs channels divisible by 4, got shape {y.shape}")
    C = C4 // 4
    x = y.reshape(B, 2, 2, C, Ho, Wo).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(x).reshape(B, C, Ho * 2, Wo * 2)


def concat_channels(a, b):
    _check_4d(a, "first input")
    _check_4d(b, "second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat needs matching batch/spatial dims, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(g, first):
    return g[:, :first], g[:, first:]
