"""Layer-stack classifiers with temperature softmax and analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from advl import tensor as tc
from advl.tensor import DTYPE, DomainError, ShapeError

LAYER_KINDS = ("conv_relu", "maxpool", "flatten", "dense_relu", "dense_linear")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack.

    ``size`` is the filter count for ``conv_relu`` and the unit count for the
    dense kinds; ``kernel`` is the square kernel side for ``conv_relu``.
    """

    kind: str
    size: int = 0
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv_relu", "dense_relu", "dense_linear") and self.size < 1:
            raise ValueError(f"{self.kind} needs a positive size")


def mnist_layers(classes=10):
    """Conv/pool/dense stack used for MNIST-sized inputs."""
    return [
        LayerSpec("conv_relu", 32), LayerSpec("conv_relu", 32), LayerSpec("maxpool"),
        LayerSpec("conv_relu", 64), LayerSpec("conv_relu", 64), LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("dense_relu", 200), LayerSpec("dense_relu", 200),
        LayerSpec("dense_linear", classes),
    ]


def cifar_layers(classes=10):
    return [
        LayerSpec("conv_relu", 64), LayerSpec("conv_relu", 64), LayerSpec("maxpool"),
        LayerSpec("conv_relu", 128), LayerSpec("conv_relu", 128), LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("dense_relu", 256), LayerSpec("dense_relu", 256),
        LayerSpec("dense_linear", classes),
    ]


def tiny_layers(classes=10):
    """Small profile for fast tests: same code paths, fewer weights."""
    return [
        LayerSpec("conv_relu", 8), LayerSpec("maxpool"), LayerSpec("flatten"),
        LayerSpec("dense_relu", 32), LayerSpec("dense_linear", classes),
    ]


PROFILES = {"mnist": mnist_layers, "cifar": cifar_layers, "tiny": tiny_layers}


# --- softmax ---------------------------------------------------------------

def _check_temperature(T):
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")


def softmax_T(logits, T=1.0):
    """``exp(z_i / T) / sum_j exp(z_j / T)`` along the last axis, max-shifted."""
    _check_temperature(T)
    z = np.asarray(logits, dtype=DTYPE) / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_T(logits, T=1.0):
    _check_temperature(T)
    z = np.asarray(logits, dtype=DTYPE) / T
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_vjp(probs, grad_probs, T=1.0):
    """Pull a cotangent on ``softmax_T(z)`` back to ``z``."""
    inner = (probs * grad_probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / T


# --- network ---------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Activations of one forward pass.

    ``logits`` and ``probs`` are ``(m,)`` for a single image and ``(N, m)``
    for a batch. ``cache`` holds whatever each layer needs for backward.
    """

    logits: np.ndarray
    probs: np.ndarray
    temperature: float
    single: bool
    cache: list = field(default_factory=list, repr=False)


class Network:
    """An ordered layer stack plus a softmax temperature.

    ``params[i]`` is ``None`` for parameter-free layers, otherwise a
    ``(weights, bias)`` pair: conv weights are ``F x C x k x k``, dense weights
    are ``units x inputs`` so that row ``t`` of the last layer produces logit
    ``t``.
    """

    def __init__(self, input_shape, layers, params, temperature=1.0):
        _check_temperature(temperature)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.params = list(params)
        self.temperature = float(temperature)
        if len(self.params) != len(self.layers):
            raise ShapeError("one params entry per layer is required")
        if not self.layers or self.layers[-1].kind != "dense_linear":
            raise ShapeError("the last layer must be dense_linear (the logits layer)")
        self._shapes = infer_shapes(self.input_shape, self.layers)
        for spec, p, (shp_in, _) in zip(self.layers, self.params, self._shapes):
            expected = _param_shapes(spec, shp_in)
            got = None if p is None else tuple(np.shape(a) for a in p)
            if got != expected:
                raise ShapeError(f"{spec.kind} parameters {got} != expected {expected}")

    @property
    def class_count(self):
        return self.layers[-1].size

    def with_temperature(self, T):
        """A view of the same parameters under a different softmax temperature."""
        return Network(self.input_shape, self.layers, self.params, T)

    def copy(self):
        params = [None if p is None else tuple(a.copy() for a in p) for p in self.params]
        return Network(self.input_shape, self.layers, params, self.temperature)

    @property
    def dtype(self):
        return next(p[0].dtype for p in self.params if p is not None)

    def astype(self, dtype):
        """A copy whose parameters (and hence forward/backward compute) use ``dtype``."""
        params = [None if p is None else tuple(np.asarray(a, dtype=dtype).copy() for a in p)
                  for p in self.params]
        return Network(self.input_shape, self.layers, params, self.temperature)

    def parameter_count(self):
        return sum(a.size for p in self.params if p is not None for a in p)

    def forward(self, x):
        return forward(self, x)

    def predict(self, x):
        return np.argmax(forward(self, x).logits, axis=-1)

    def __repr__(self):
        kinds = ",".join(f"{s.kind}:{s.size}" if s.size else s.kind for s in self.layers)
        return f"Network(input={self.input_shape}, T={self.temperature:g}, [{kinds}])"


def infer_shapes(input_shape, layers):
    """Per-layer (input, output) shapes, channel-first, batch axis omitted."""
    shapes = []
    cur = tuple(input_shape)
    for spec in layers:
        if spec.kind == "conv_relu":
            if len(cur) != 3:
                raise ShapeError(f"conv_relu needs C x H x W input, got {cur}")
            c, h, w = cur
            if spec.kernel > h or spec.kernel > w:
                raise ShapeError(f"kernel {spec.kernel} larger than input {h}x{w}")
            out = (spec.size, h - spec.kernel + 1, w - spec.kernel + 1)
        elif spec.kind == "maxpool":
            if len(cur) != 3 or cur[1] % 2 or cur[2] % 2:
                raise ShapeError(f"maxpool needs even spatial dims, got {cur}")
            out = (cur[0], cur[1] // 2, cur[2] // 2)
        elif spec.kind == "flatten":
            out = (int(np.prod(cur)),)
        else:
            if len(cur) != 1:
                raise ShapeError(f"{spec.kind} needs a flat input, got {cur}; add a flatten layer")
            out = (spec.size,)
        shapes.append((cur, out))
        cur = out
    return shapes


def _param_shapes(spec, shape_in):
    if spec.kind == "conv_relu":
        return ((spec.size, shape_in[0], spec.kernel, spec.kernel), (spec.size,))
    if spec.kind in ("dense_relu", "dense_linear"):
        return ((spec.size, shape_in[0]), (spec.size,))
    return None


def init_network(input_shape, layers, seed=0, temperature=1.0):
    """Glorot-uniform weights and zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for spec, (shp_in, _) in zip(layers, infer_shapes(input_shape, layers)):
        shapes = _param_shapes(spec, shp_in)
        if shapes is None:
            params.append(None)
            continue
        wshape, bshape = shapes
        if spec.kind == "conv_relu":
            rf = spec.kernel * spec.kernel
            fan_in, fan_out = shp_in[0] * rf, spec.size * rf
        else:
            fan_in, fan_out = shp_in[0], spec.size
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append((rng.uniform(-limit, limit, size=wshape), np.zeros(bshape)))
    return Network(input_shape, layers, params, temperature)


def build_network(profile, input_shape=(1, 28, 28), classes=10, seed=0, temperature=1.0):
    return init_network(input_shape, PROFILES[profile](classes), seed, temperature)


# --- forward / backward ----------------------------------------------------

def _prepare_input(net, x):
    x = np.asarray(x, dtype=net.dtype)
    shp = net.input_shape
    if x.shape == shp:
        single, x = True, x[None]
    elif x.ndim == len(shp) + 1 and x.shape[1:] == shp:
        single = False
    else:
        raise ShapeError(f"input shape {x.shape} does not match network input {shp}")
    if x.ndim == 4:
        x = x.transpose(0, 2, 3, 1)  # layers run channel-last internally
    return x, single


def forward(net, x, keep_cols=False):
    """Run ``x`` (one image or a batch) through the stack.

    ``keep_cols`` stores the convolution im2col matrices in the trace, which
    speeds up a following parameter-gradient pass at the cost of memory.
    """
    h, single = _prepare_input(net, x)
    cache = []
    for spec, p in zip(net.layers, net.params):
        if spec.kind == "conv_relu":
            if keep_cols:
                pre, cols = tc.conv2d_nhwc_forward(h, p[0], p[1], return_cols=True)
            else:
                pre, cols = tc.conv2d_nhwc_forward(h, p[0], p[1]), None
            cache.append((h, pre, cols))
            h = np.maximum(pre, 0.0)
        elif spec.kind == "maxpool":
            h, idx = tc.maxpool2x2_nhwc(h)
            cache.append(idx)
        elif spec.kind == "flatten":
            cache.append(h.shape)
            if h.ndim == 4:
                h = h.transpose(0, 3, 1, 2)  # flatten in channel-first order
            h = h.reshape(h.shape[0], -1)
        else:
            pre = h @ p[0].T + p[1]
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if spec.kind == "dense_relu" else pre
    logits = h
    probs = softmax_T(logits, net.temperature)
    if single:
        logits, probs = logits[0], probs[0]
    return ForwardTrace(logits, probs, net.temperature, single, cache)


def backward(net, trace, grad_logits, need_input=True, need_params=False):
    """Back-propagate ``grad_logits`` through a recorded forward pass.

    Returns ``(grad_input, param_grads)``. ``param_grads`` mirrors
    ``net.params`` and sums (not averages) over the batch.
    """
    g = np.asarray(grad_logits, dtype=net.dtype)
    if trace.single:
        g = g[None]
    param_grads = [None] * len(net.layers)
    first_param = next(i for i, p in enumerate(net.params) if p is not None)
    for i in range(len(net.layers) - 1, -1, -1):
        spec, p, c = net.layers[i], net.params[i], trace.cache[i]
        # below the first parametrised layer only the input gradient matters
        if not need_input and i < first_param:
            break
        if spec.kind == "conv_relu":
            h_in, pre, cols = c
            g = np.where(pre > 0, g, 0.0)
            want_in = need_input or i > first_param
            gi, gk, gb = tc.conv2d_nhwc_backward(h_in, p[0], g, need_input=want_in,
                                                 need_params=need_params, cols=cols)
            if need_params:
                param_grads[i] = (gk, gb)
            g = gi
        elif spec.kind == "maxpool":
            g = tc.maxpool2x2_nhwc_backward(g, c)
        elif spec.kind == "flatten":
            shp = c
            if len(shp) == 4:
                n, hh, ww, cc = shp
                g = g.reshape(n, cc, hh, ww).transpose(0, 2, 3, 1)
            else:
                g = g.reshape(shp)
        else:
            h_in, pre = c
            if spec.kind == "dense_relu":
                g = np.where(pre > 0, g, 0.0)
            if need_params:
                param_grads[i] = (g.T @ h_in, g.sum(axis=0))
            g = g @ p[0]
    grad_input = None
    if need_input:
        if g.ndim == 4:
            g = g.transpose(0, 3, 1, 2)
        grad_input = np.ascontiguousarray(g[0] if trace.single else g)
    return grad_input, param_grads


def value_and_input_gradient(net, x, loss):
    """Evaluate ``loss`` at ``x`` and its exact gradient with respect to ``x``.

    ``loss(logits, probs)`` must return ``(values, grad_logits)`` for the
    array shapes it is given (``(m,)`` or ``(N, m)``); per-sample values are
    differentiated independently.
    """
    trace = forward(net, x)
    value, grad_logits = loss(trace.logits, trace.probs)
    grad_x, _ = backward(net, trace, grad_logits, need_input=True)
    return value, grad_x, trace


def input_gradient(net, x, loss):
    """Exact ``d loss / d x`` for one image or, per sample, for a batch."""
    return value_and_input_gradient(net, x, loss)[1]


def param_gradients(net, images, loss):
    """Batch-averaged loss and parameter gradients.

    Returns ``(mean_loss, grads)`` with ``grads`` aligned to ``net.params``.
    """
    images = np.asarray(images, dtype=DTYPE)
    if images.shape == net.input_shape:
        images = images[None]
    trace = forward(net, images)
    values, grad_logits = loss(trace.logits, trace.probs)
    n = images.shape[0]
    _, grads = backward(net, trace, np.asarray(grad_logits) / n, need_input=False,
                        need_params=True)
    return float(np.mean(values)), grads


# --- common losses ---------------------------------------------------------

def logit_loss(index):
    """``loss = z[index]``; handy for checking gradients."""
    def loss(logits, probs):
        g = np.zeros_like(logits)
        g[..., index] = 1.0
        return logits[..., index], g
    return loss


def constant_loss(value=0.0):
    def loss(logits, probs):
        return np.full(logits.shape[:-1], value), np.zeros_like(logits)
    return loss
