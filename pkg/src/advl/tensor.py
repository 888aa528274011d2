"""Dense float64 kernels with analytic backward passes.

Arrays are plain ``numpy.ndarray`` objects in float64. The public convolution
and pooling kernels take channel-first images (``C x H x W``) or batches of
them (``N x C x H x W``). The ``*_nhwc`` variants work on channel-last batches
and are what the network engine uses internally, since im2col on a
channel-last layout is a single contiguous reshape.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the kernel contract."""


class DomainError(ValueError):
    """An argument lies outside the domain of the requested function."""


def as_tensor(data, shape=None):
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def matmul(a, b):
    """``c[i, j] = sum_p a[i, p] * b[p, j]`` for 2-D operands."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


# --- convolution -----------------------------------------------------------

def _floats(a):
    # float32 inputs stay float32 (reduced-precision training); all else -> DTYPE
    a = np.asarray(a)
    return a if a.dtype == np.float32 else a.astype(DTYPE, copy=False)


def _im2col_nhwc(x, kh, kw):
    n, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = cols.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * ho * wo, kh * kw * c)


def _kernel_matrix(kernels):
    # (F, C, kh, kw) -> (kh*kw*C, F), matching the im2col column order
    f, c, kh, kw = kernels.shape
    return kernels.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)


def _check_conv(x_shape, kernels, bias):
    n, h, w, c = x_shape
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be F x C x kh x kw, got {kernels.shape}")
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"kernel channels {kc} != input channels {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and np.shape(bias) != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {np.shape(bias)}")


def conv2d_nhwc_forward(x, kernels, bias, return_cols=False):
    """Valid, stride-1 convolution of an ``N x H x W x C`` batch.

    Returns an ``N x H' x W' x F`` array with ``H' = H - kh + 1``, plus the
    im2col matrix when ``return_cols`` is set (it can be handed back to the
    backward pass to skip rebuilding it).
    """
    x = _floats(x)
    kernels = _floats(kernels)
    _check_conv(x.shape, kernels, bias)
    n, h, w, _ = x.shape
    f, _, kh, kw = kernels.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = _im2col_nhwc(x, kh, kw)
    out = cols @ _kernel_matrix(kernels)
    out += bias
    out = out.reshape(n, ho, wo, f)
    return (out, cols) if return_cols else out


def conv2d_nhwc_backward(x, kernels, grad_out, need_input=True, need_params=True, cols=None):
    """Gradients of ``<grad_out, conv2d_nhwc_forward(x, kernels, bias)>``.

    Returns ``(grad_input, grad_kernels, grad_bias)``; entries that were not
    requested are ``None``.
    """
    x = _floats(x)
    kernels = _floats(kernels)
    grad_out = _floats(grad_out)
    _check_conv(x.shape, kernels, None)
    n, h, w, c = x.shape
    f, _, kh, kw = kernels.shape
    if grad_out.shape != (n, h - kh + 1, w - kw + 1, f):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    g2 = grad_out.reshape(-1, f)

    grad_input = grad_kernels = grad_bias = None
    if need_params:
        if cols is None:
            cols = _im2col_nhwc(x, kh, kw)
        gk = cols.T @ g2  # (kh*kw*C, F)
        grad_kernels = gk.reshape(kh, kw, c, f).transpose(3, 2, 0, 1).copy()
        grad_bias = g2.sum(axis=0)
    if need_input:
        # full correlation of the padded cotangent with the flipped kernels
        padded = np.pad(grad_out, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        flipped = kernels[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
        grad_input = (_im2col_nhwc(padded, kh, kw) @ flipped).reshape(n, h, w, c)
    return grad_input, grad_kernels, grad_bias


def _to_nhwc(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x.transpose(1, 2, 0)[None], True
    if x.ndim == 4:
        return x.transpose(0, 2, 3, 1), False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def _from_nhwc(y, single):
    y = y.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y[0] if single else y)


def conv2d_forward(x, kernels, bias):
    """``out[f, i, j] = bias[f] + sum_{c,u,v} x[c, i+u, j+v] * kernels[f, c, u, v]``."""
    xh, single = _to_nhwc(x)
    return _from_nhwc(conv2d_nhwc_forward(xh, kernels, bias), single)


def conv2d_backward(x, kernels, grad_out):
    """Channel-first wrapper around :func:`conv2d_nhwc_backward`."""
    xh, single = _to_nhwc(x)
    gh, gsingle = _to_nhwc(grad_out)
    if gsingle != single:
        raise ShapeError("grad_out and input disagree on batching")
    gi, gk, gb = conv2d_nhwc_backward(xh, kernels, gh)
    return _from_nhwc(gi, single), gk, gb


# --- pooling ---------------------------------------------------------------

def maxpool2x2_nhwc(x):
    """2x2 max pooling on an ``N x H x W x C`` batch.

    Returns ``(out, argmax)`` where ``argmax`` holds the row-major index
    (0..3) of the winning cell in each window; ties go to the lowest index.
    """
    x = _floats(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_nhwc_backward(grad_out, argmax):
    n, ho, wo, c = grad_out.shape
    win = np.zeros((n, ho, wo, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return win.reshape(n, 2 * ho, 2 * wo, c)


def maxpool2x2(x):
    """Channel-first 2x2 max pooling.

    ``argmax`` has the output's shape plus a trailing axis of length 2
    holding the ``(row, col)`` of the winner inside its window.
    """
    xh, single = _to_nhwc(x)
    out, idx = maxpool2x2_nhwc(xh)
    pos = np.stack([idx // 2, idx % 2], axis=-1).transpose(0, 3, 1, 2, 4)
    return _from_nhwc(out, single), (pos[0] if single else pos)


def maxpool2x2_backward(grad_out, argmax):
    gh, single = _to_nhwc(grad_out)
    pos = np.asarray(argmax)
    if single:
        pos = pos[None]
    idx = (2 * pos[..., 0] + pos[..., 1]).transpose(0, 2, 3, 1)
    return _from_nhwc(maxpool2x2_nhwc_backward(gh, idx), single)


# --- pointwise -------------------------------------------------------------

def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_grad(x, grad=None):
    """Derivative of relu at ``x`` (0 at the kink), optionally times ``grad``."""
    mask = np.asarray(x, dtype=DTYPE) > 0
    if grad is None:
        return mask.astype(DTYPE)
    return np.where(mask, grad, 0.0)


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def arctanh(x):
    x = np.asarray(x, dtype=DTYPE)
    if np.any(np.abs(x) >= 1) or np.any(np.isnan(x)):
        raise DomainError("arctanh needs arguments strictly inside (-1, 1)")
    return np.arctanh(x)


def _binary(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _binary(a, b)
    return a + b


def sub(a, b):
    a, b = _binary(a, b)
    return a - b


def scale(a, s):
    return np.asarray(a, dtype=DTYPE) * float(s)


def clamp(a, lo=0.0, hi=1.0):
    return np.clip(np.asarray(a, dtype=DTYPE), lo, hi)


_POINTWISE = {
    "relu": relu,
    "relu_grad": relu_grad,
    "tanh": tanh,
    "arctanh": arctanh,
    "add": add,
    "sub": sub,
    "scale": scale,
    "clamp": clamp,
}


def elementwise(kind, *args):
    """Dispatch a pointwise kernel by name."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)
