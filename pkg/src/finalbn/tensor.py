"""Dense float64 kernels shared by every layer.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the shape and finiteness checks the layers rely on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value enters or leaves an operation."""


class BatchTooSmallError(ValueError):
    """Raised when a train-mode batch statistic needs more samples."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (n, c, ho, wo, kh, kw) -> (n*ho*wo, c*kh*kw)
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input channels {x.shape[1]} do not match kernel {kernel.shape}"
        )
    if kernel.shape[2] > x.shape[2] or kernel.shape[3] > x.shape[3]:
        raise DimensionError(
            f"kernel {kernel.shape} larger than input {x.shape}"
        )


def conv2d_forward(x, kernel, bias) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    ``out[b, o, i, j] = bias[o] + sum_{c,u,v} x[b, c, i+u, j+v] * kernel[o, c, u, v]``
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias)
    _check_conv_shapes(x, kernel)
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match kernel {kernel.shape}")
    n, _, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = _windows(x, kh, kw)
    out = cols @ kernel.reshape(cout, -1).T + bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernel):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    grad_out = as_tensor(grad_out)
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho, wo = h - kh + 1, w - kw + 1
    if grad_out.shape != (n, cout, ho, wo):
        raise DimensionError(
            f"grad_out {grad_out.shape} does not match output shape {(n, cout, ho, wo)}"
        )
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    cols = _windows(x, kh, kw)
    grad_kernel = (g.T @ cols).reshape(kernel.shape)
    grad_bias = g.sum(axis=0)

    dcols = (g @ kernel.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    grad_x = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            grad_x[:, :, u:u + ho, v:v + wo] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return grad_x, grad_kernel, grad_bias


def reduce_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and biased variance over the batch axis of an ``m x d`` array."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"reduce_stats expects a 2-d array, got shape {x.shape}")
    if x.shape[0] < 1:
        raise BatchTooSmallError("reduce_stats needs at least one row")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var
