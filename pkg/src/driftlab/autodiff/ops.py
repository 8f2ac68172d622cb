"""Differentiable operations used by the segmentation network.

Every op takes and returns :class:`Tensor`; the backward closure maps the
output gradient to one gradient per parent (``None`` for constants).
"""

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

IGNORE_LABEL = 255


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names the dimension."""


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def mul_scalar(a, s):
    s = float(s)
    out = a.data * a.data.dtype.type(s)

    def backward(g):
        return (g * g.dtype.type(s),)

    return make_result(out, (a,), backward)


def sum(a):  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_result(out, (a,), backward)


def mean(a):
    n = a.data.size
    return mul_scalar(sum(a), 1.0 / n)


def relu(a):
    mask = a.data > 0
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (a,), backward)


def flatten(a, start_dim=1):
    shape = a.shape
    out = a.data.reshape(shape[:start_dim] + (-1,))

    def backward(g):
        return (g.reshape(shape),)

    return make_result(out, (a,), backward)


def reshape(a, shape):
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return make_result(out, (a,), backward)


# --------------------------------------------------------------------------- conv


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x, w, b, stride, padding):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.ndim} dims")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIKK, got {w.ndim} dims")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input C={x.shape[1]} but weight I={w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias must have shape ({w.shape[0]},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    kh, kw = w.shape[2:]
    for dim, size, k in (("H", x.shape[2], kh), ("W", x.shape[3], kw)):
        if size + 2 * padding < k:
            raise ShapeError(
                f"conv2d kernel {k} does not fit padded input {dim}={size}+2*{padding}"
            )


def _im2col(x, kh, kw, stride, padding, ho, wo):
    """Columns in (n, ho, wo) x (kh, kw, c) order from NCHW input."""
    n, c, h, w = x.shape
    xh = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xh[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    # strided window view, materialised by the single reshape copy
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _conv_input_grad(g, wdata, stride, padding, in_h, in_w):
    n, o, ho, wo = g.shape
    _, c, kh, kw = wdata.shape
    if stride == 1 and padding <= min(kh, kw) - 1 and kh == kw:
        # transposed convolution: correlate the padded gradient with the flipped kernel
        cols = _im2col(g, kh, kw, 1, kh - 1 - padding, in_h, in_w)
        wflip = wdata[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
        gx = (cols @ wflip.T).reshape(n, in_h, in_w, c)
    else:
        # col2im: project onto columns, then scatter-add tap by tap
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gcols = (g2 @ wdata.transpose(0, 2, 3, 1).reshape(o, -1)).reshape(n, ho, wo, kh, kw, c)
        buf = np.zeros((n, in_h + 2 * padding + stride + kh, in_w + 2 * padding + stride + kw, c),
                       dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                buf[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = buf[:, padding:padding + in_h, padding:padding + in_w, :]
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over NCHW input with an OIKK weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv(x, weight, bias, stride, padding)
    n, c, h, w_ = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w_, kw, stride, padding)

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = _conv_input_grad(g, weight.data, stride, padding, h, w_) if x.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


# --------------------------------------------------------------------------- resampling


def max_pool2x2(a):
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even H and W, got H={h}, W={w}")
    blocks = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return make_result(out, (a,), backward)


@functools.lru_cache(maxsize=64)
def _upsample_matrix(size, dtype_str):
    # half-pixel centres, edge-clamped (align_corners=False convention)
    out = np.zeros((2 * size, size), dtype=np.float64)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        out[o, i0] += 1.0 - frac
        out[o, i1] += frac
    return out.astype(dtype_str)


def bilinear_upsample2x(a):
    n, c, h, w = a.shape
    uh = _upsample_matrix(h, a.dtype.str)
    uw = _upsample_matrix(w, a.dtype.str)
    out = np.matmul(uh, a.data @ uw.T)

    def backward(g):
        return (np.matmul(uh.T, g @ uw),)

    return make_result(out, (a,), backward)


# --------------------------------------------------------------------------- loss


def softmax_cross_entropy(logits, target, ignore_label=IGNORE_LABEL):
    """Pixel-wise cross-entropy averaged over non-ignored pixels.

    ``logits`` is (N, C, H, W); ``target`` is an integer array (N, H, W).
    """
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    valid = target != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no supervised pixels")
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        raise ValueError(f"target contains labels outside [0, {c}) other than {ignore_label}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    safe_t = np.where(valid, target, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe_t[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = np.asarray(loss, dtype=z.dtype)

    def backward(g):
        grad = expz / denom
        np.put_along_axis(grad, safe_t[:, None], np.take_along_axis(grad, safe_t[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        grad *= g / count
        return (grad.astype(z.dtype, copy=False),)

    return make_result(out, (logits,), backward)
