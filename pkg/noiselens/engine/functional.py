"""Neural-network primitives on top of the tensor tape.

Convolutions use a sliding-window (im2col-style) view and ``numpy.tensordot`` so every
reduction runs in a fixed order and results are bitwise reproducible.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from noiselens.core.exceptions import ShapeError
from noiselens.engine.tensor import DTYPE, as_tensor, make_result

NORM_EPS = 1e-5


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, kh, kw, stride, out_h, out_w):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _correlate(xp, kernel, stride, out_h, out_w):
    """(N, C, Hp, Wp) ⋆ (O, C, kh, kw) -> (N, O, out_h, out_w)."""
    kh, kw = kernel.shape[2:]
    win = _windows(xp, kh, kw, stride, out_h, out_w)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=DTYPE)


def _scatter(grad_out, kernel, stride, full_h, full_w):
    """Adjoint of ``_correlate`` with respect to its padded input."""
    n, _, out_h, out_w = grad_out.shape
    _, channels, kh, kw = kernel.shape
    full = np.zeros((n, channels, full_h, full_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, kernel[:, :, i, j], axes=([1], [0]))
            full[
                :,
                :,
                i : i + (out_h - 1) * stride + 1 : stride,
                j : j + (out_w - 1) * stride + 1 : stride,
            ] += contrib.transpose(0, 3, 1, 2)
    return full


def _kernel_grad(xp, grad_out, kh, kw, stride):
    """Gradient of ``_correlate`` with respect to the kernel: (O, C, kh, kw)."""
    out_h, out_w = grad_out.shape[2:]
    win = _windows(xp, kh, kw, stride, out_h, out_w)
    return np.ascontiguousarray(
        np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3])), dtype=DTYPE
    )


def _check_conv_args(x, kernel, stride, padding, bias, channel_axis):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"Expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"Invalid stride {stride} / padding {padding}")
    if x.shape[1] != kernel.shape[channel_axis]:
        raise ShapeError(
            f"Input has {x.shape[1]} channels, kernel expects {kernel.shape[channel_axis]}"
        )
    if bias is not None:
        out_channels = kernel.shape[1 - channel_axis]
        if bias.shape != (out_channels,):
            raise ShapeError(f"Bias shape {bias.shape} does not match {out_channels} channels")


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D cross-correlation.

    Args:
        x: Input tensor [N, C_in, H, W].
        kernel: Kernel tensor [C_out, C_in, kH, kW].
        stride: Step between windows (>= 1).
        padding: Zero padding added on every side.
        bias: Optional per-output-channel bias [C_out].

    Returns:
        Tensor: [N, C_out, H', W'] with H' = floor((H + 2p - kH) / stride) + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, padding, bias, channel_axis=1)
    _, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"Kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    xp = _pad(x.data, padding)
    out = _correlate(xp, kernel.data, stride, out_h, out_w)
    inputs = (x, kernel)
    if bias is not None:
        out += bias.data[None, :, None, None]
        inputs = (x, kernel, bias)
    needs_x, needs_k = x.requires_grad, kernel.requires_grad

    def backward_fn(g):
        gx = gk = None
        if needs_x:
            full = _scatter(g, kernel.data, stride, xp.shape[2], xp.shape[3])
            gx = np.ascontiguousarray(full[:, :, padding : padding + h, padding : padding + w])
        if needs_k:
            gk = _kernel_grad(xp, g, kh, kw, stride)
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)).astype(DTYPE),)
        return grads

    return make_result("conv2d", out, inputs, backward_fn)


def conv_transpose2d(x, kernel, stride=1, padding=0, bias=None):
    """Transposed 2-D convolution, the adjoint of ``conv2d``.

    Args:
        x: Input tensor [N, C_in, H, W].
        kernel: Kernel tensor [C_in, C_out, kH, kW].
        stride: Upsampling factor (>= 1).
        padding: Rows/columns cropped from every side of the full result.
        bias: Optional per-output-channel bias [C_out].

    Returns:
        Tensor: [N, C_out, H', W'] with H' = (H - 1) * stride - 2p + kH.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, padding, bias, channel_axis=0)
    _, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Padding {padding} leaves no output for input {h}x{w}")

    full = _scatter(x.data, kernel.data, stride, full_h, full_w)
    out = np.ascontiguousarray(full[:, :, padding : padding + out_h, padding : padding + out_w])
    inputs = (x, kernel)
    if bias is not None:
        out += bias.data[None, :, None, None]
        inputs = (x, kernel, bias)
    needs_x, needs_k = x.requires_grad, kernel.requires_grad

    def backward_fn(g):
        gfull = _pad(g, padding)
        gx = _correlate(gfull, kernel.data, stride, h, w) if needs_x else None
        gk = _kernel_grad(gfull, x.data, kh, kw, stride) if needs_k else None
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)).astype(DTYPE),)
        return grads

    return make_result("conv_transpose2d", out, inputs, backward_fn)


def instance_norm(x, scale, shift, eps=NORM_EPS):
    """Normalize every (n, c) slice to zero mean / unit variance, then scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects [N, C, H, W], got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"scale/shift must have shape ({channels},)")

    data = x.data.astype(np.float64)
    mean = data.mean(axis=(2, 3), keepdims=True)
    var = data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean) * inv_std
    gamma = scale.data.astype(np.float64)[None, :, None, None]
    out = (gamma * xhat + shift.data.astype(np.float64)[None, :, None, None]).astype(DTYPE)
    count = x.shape[2] * x.shape[3]

    def backward_fn(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma
        gx = (
            inv_std
            / count
            * (
                count * gxhat
                - gxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
            )
        )
        return (
            gx.astype(DTYPE),
            (g64 * xhat).sum(axis=(0, 2, 3)).astype(DTYPE),
            g64.sum(axis=(0, 2, 3)).astype(DTYPE),
        )

    return make_result("instance_norm", out, (x, scale, shift), backward_fn)


def matmul(a, b):
    """Matrix product of [M, K] and [K, N] tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return make_result(
        "matmul",
        x @ y,
        (a, b),
        lambda g: (
            (g @ y.T).astype(DTYPE) if a.requires_grad else None,
            (x.T @ g).astype(DTYPE) if b.requires_grad else None,
        ),
    )


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)
    return make_result(
        "softmax",
        out,
        (x,),
        lambda g: ((out * (g - (g * out).sum(axis=axis, keepdims=True))).astype(DTYPE),),
    )
