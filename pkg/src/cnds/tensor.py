"""Dense forward/backward primitives on numpy arrays.

Activations use the ``(batch, channel, height, width)`` layout and
convolution kernels ``(out_channels, in_channels, kh, kw)``.  Every
function is pure; backward helpers take the values saved by the
matching forward call.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "conv_output_size",
    "conv2d",
    "conv2d_backward",
    "maxpool",
    "maxpool_backward",
    "relu",
    "relu_backward",
    "linear",
    "linear_backward",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "softmax_cross_entropy_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def conv_output_size(size, kernel, stride, pad):
    """Spatial extent of a convolution or pooling output."""
    out = (size + 2 * pad - kernel) // stride + 1
    if size + 2 * pad < kernel or out < 1:
        raise ShapeError(
            f"nonpositive output extent: size={size} kernel={kernel} "
            f"stride={stride} pad={pad}"
        )
    return out


def _windows(x, kh, kw, stride):
    # (N, C, oH, oW, kh, kw) strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(x, kh, kw, stride):
    # rows ordered (n, oh, ow); columns ordered (c, kh, kw) to match kernels
    win = _windows(x, kh, kw, stride)
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x, kernels, bias, stride=1, pad=0):
    """2-D cross-correlation of ``x`` with ``kernels`` plus ``bias``."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}"
        )
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"input channels do not match kernel in-channels: "
            f"input {x.shape}, kernels {kernels.shape}"
        )
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(
            f"bias shape {bias.shape} does not match kernels {kernels.shape}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    kh, kw = kernels.shape[2:]
    conv_output_size(x.shape[2], kh, stride, pad)
    conv_output_size(x.shape[3], kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, oh, ow = _im2col(x, kh, kw, stride)
    out = cols @ kernels.reshape(kernels.shape[0], -1).T + bias
    return out.reshape(x.shape[0], oh, ow, -1).transpose(0, 3, 1, 2)


def conv2d_backward(dout, x, kernels, stride=1, pad=0):
    """Gradients ``(dx, dkernels, dbias)`` of :func:`conv2d`."""
    n, c, h, w = x.shape
    kh, kw = kernels.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, dout.shape[1])
    dkernels = (dmat.T @ cols).reshape(kernels.shape)
    dbias = dmat.sum(axis=0)
    dcols = (dmat @ kernels.reshape(kernels.shape[0], -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros(xp.shape, dtype=dcols.dtype)
    # scatter each kernel tap back; fixed loop order keeps the sum deterministic
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dkernels, dbias


def maxpool(x, window, stride):
    """Max pooling; returns ``(out, argmax)``.

    ``argmax`` holds, per output element, the flat row-major index of the
    winning input position within its ``(H, W)`` plane.  Ties go to the
    first position in row-major scan order.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects a 4-d input, got {x.shape}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"window {window} larger than input {x.shape}")
    oh = conv_output_size(x.shape[2], window, stride, 0)
    ow = conv_output_size(x.shape[3], window, stride, 0)
    cols = _windows(x, window, window, stride)
    flat = cols.reshape(cols.shape[:4] + (window * window,))
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // window
    cols_ = np.arange(ow)[None, :] * stride + local % window
    argmax = rows * x.shape[3] + cols_
    return out, argmax


def maxpool_backward(dout, argmax, input_shape):
    """Route ``dout`` to the recorded argmax positions."""
    n, c, h, w = input_shape
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    bi, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    # overlapping windows may share a winner, so accumulate
    np.add.at(dx, (bi[..., None], ci[..., None], argmax.reshape(n, c, -1)),
              dout.reshape(n, c, -1))
    return dx.reshape(input_shape)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, out):
    return dout * (out > 0)


def linear(x, weights, bias):
    """Affine map ``W @ x + b`` over the flattened trailing dimensions."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    flat = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or flat.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"flattened input {flat.shape} (from {x.shape}) does not match "
            f"weights {weights.shape}"
        )
    if np.shape(bias) != (weights.shape[0],):
        raise ShapeError(
            f"bias shape {np.shape(bias)} does not match weights {weights.shape}"
        )
    return flat @ weights.T + bias


def linear_backward(dout, x, weights):
    flat = x.reshape(x.shape[0], -1)
    dweights = dout.T @ flat
    dbias = dout.sum(axis=0)
    dx = (dout @ weights).reshape(x.shape)
    return dx, dweights, dbias


def softmax(logits):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_labels(labels, k):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels}")
    return labels.astype(np.intp)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true labels.

    A 1-d ``probs`` with a scalar label is a single example.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = check_labels(labels, probs.shape[-1])
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError(f"{probs.shape[0]} rows but {labels.shape[0]} labels")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of mean cross-entropy w.r.t. the logits."""
    labels = check_labels(labels, probs.shape[-1])
    d = probs.copy()
    d[np.arange(probs.shape[0]), labels] -= 1.0
    return d / probs.shape[0]
