"""Differentiable numpy building blocks.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every layer keeps
the intermediates of its last training forward pass and consumes them in
``backward``; calling ``backward`` twice without a new forward raises
:class:`StaleGraphError`.

float32 is the working precision. Casting a layer with ``astype(np.float64)``
gives the 64-bit mode used by :func:`grad_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    InvalidHyperparameterError,
    ShapeMismatchError,
    StaleGraphError,
)

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

SGD_LR = 1e-3
SGD_MOMENTUM = 0.9
SGD_WEIGHT_DECAY = 0.0005


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.momentum_buffer.shape):
            raise ShapeMismatchError("parameter value/grad/momentum shapes differ")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum_buffer = self.momentum_buffer.astype(dtype)


@dataclass
class LossResult:
    loss: float
    probabilities: np.ndarray
    logit_grad: np.ndarray


# ---------------------------------------------------------------------------
# functional forward passes
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """Patch matrix of shape (c * kh * kw, n * ho * wo), rows ordered (c, kh, kw)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _conv_forward(x, weight, bias, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-D input/weights, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeMismatchError(f"conv2d input has {c} channels, weights expect {in_ch}")
    if stride < 1 or padding < 0:
        raise InvalidHyperparameterError(f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidHyperparameterError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        ho, wo = h, w
    else:
        cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = weight.reshape(out_ch, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(out_ch, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(input, weights, bias=None, stride=1, padding=0):
    """Cross-correlation of an NCHW batch with OIHW weights (no kernel flip)."""
    return _conv_forward(input, weights, bias, stride, padding)[0]


def _bn_forward(x, gamma, beta, eps, train, running_mean, running_var, momentum):
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"batchnorm2d affine params must have shape ({c},)")
    axes = (0, 2, 3)
    if train:
        m = n * h * w
        if m < 2:
            raise InvalidHyperparameterError(
                "batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), xhat, inv_std


def batchnorm2d(input, gamma, beta, eps=BN_EPS, mode="train", running_stats=None,
                momentum=BN_MOMENTUM):
    """Per-channel normalization over (batch, H, W).

    ``running_stats`` is a ``(mean, var)`` pair of arrays. Train mode updates
    them in place; eval mode reads them.
    """
    train = _is_train(mode)
    if running_stats is None:
        if not train:
            raise InvalidHyperparameterError("eval-mode batchnorm2d needs running stats")
        rm = rv = None
    else:
        rm, rv = running_stats
    return _bn_forward(input, gamma, beta, eps, train, rm, rv, momentum)[0]


def relu(input):
    return np.maximum(input, 0)


def _pool_forward(x, window, stride):
    """Window maxima and the flat in-window index of each maximum (first wins on ties)."""
    n, c, h, w = x.shape
    if h < window or w < window:
        raise InvalidHyperparameterError(
            f"maxpool2d input {h}x{w} smaller than the {window}x{window} window")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    views = [x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
             for i in range(window) for j in range(window)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    idx = np.full(out.shape, window * window, dtype=np.int8)
    for pos, v in enumerate(views):
        idx = np.where((idx == window * window) & (v == out), np.int8(pos), idx)
    return out, idx


def maxpool2d(input, window=3, stride=2):
    """Max over window x window patches; incomplete border windows are dropped."""
    return _pool_forward(input, window, stride)[0]


def dense(input, weights, bias=None):
    if input.ndim != 2 or input.shape[1] != weights.shape[1]:
        raise ShapeMismatchError(
            f"dense input {input.shape} incompatible with weights {weights.shape}")
    out = input @ weights.T
    if bias is not None:
        out += bias
    return out


def dropout(input, p_drop, mode="train", rng=None):
    if not 0 <= p_drop < 1:
        raise InvalidHyperparameterError(f"p_drop must lie in [0, 1), got {p_drop}")
    if not _is_train(mode) or p_drop == 0:
        return input
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(input.shape) >= p_drop).astype(input.dtype) / (1 - p_drop)
    return input * mask


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> LossResult:
    """Mean categorical cross entropy of softmax(logits) against one-hot labels."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != logits.shape or logits.shape[0] < 1:
        raise ShapeMismatchError(f"logits {logits.shape} and labels {labels.shape} must match (t, C)")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    t = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-(labels * log_p).sum() / t)
    p = np.exp(log_p)
    return LossResult(loss=max(loss, 0.0), probabilities=p, logit_grad=(p - labels) / t)


def one_hot(indices, n_classes, dtype=DEFAULT_DTYPE):
    out = np.zeros((len(indices), n_classes), dtype=dtype)
    out[np.arange(len(indices)), np.asarray(indices)] = 1
    return out


def _is_train(mode) -> bool:
    if isinstance(mode, bool):
        return mode
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class: parameters, a training-mode cache, and backward()."""

    kind = "layer"

    def __init__(self):
        self._cache = None

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        return iter(())

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        for name, p in self.parameters().items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers().items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, name, value):
        raise KeyError(name)

    def layers(self) -> Iterator["Layer"]:
        yield self
        for _, child in self.children():
            yield from child.layers()

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.astype(dtype)
        for layer in self.layers():
            layer._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        pass

    def release(self):
        for layer in self.layers():
            layer._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StaleGraphError(
                f"{type(self).__name__}.backward() called without a recorded training forward")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True,
                 rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        if stride < 1 or padding < 0 or kernel < 1:
            raise InvalidHyperparameterError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, ReLU gain
        self.weight = Parameter(
            rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype)) if bias else None
        self.input_grad = True  # False: backward() returns None (first layer of a network)

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def forward(self, x, train=False):
        b = self.bias.value if self.bias is not None else None
        out, cols = _conv_forward(x, self.weight.value, b, self.stride, self.padding)
        if train:
            self._cache = (x.shape, cols, out.shape)
        return out

    def backward(self, dy):
        x_shape, cols, out_shape = self._take_cache()
        n, c, h, w = x_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = out_shape[2:]
        dy2 = dy.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
        self.weight.grad += (dy2 @ cols.T).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=1)
        if not self.input_grad:
            return None
        dcols = self.weight.value.reshape(self.out_ch, -1).T @ dy2
        if k == 1 and s == 1 and p == 0:
            return np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        dcols = dcols.reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))

    def describe(self):
        return {"kind": self.kind, "in": self.in_ch, "out": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias is not None}


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name, value):
        getattr(self, name)[...] = value

    def _cast_buffers(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x, train=False):
        out, xhat, inv_std = _bn_forward(x, self.gamma.value, self.beta.value, self.eps, train,
                                         self.running_mean, self.running_var, self.momentum)
        if train:
            self._cache = (xhat, inv_std)
        return out

    def backward(self, dy):
        xhat, inv_std = self._take_cache()
        axes = (0, 2, 3)
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.value[None, :, None, None]
        sum_d = dxhat.sum(axis=axes, keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (m * dxhat - sum_d - xhat * sum_dx) * (inv_std[None, :, None, None] / m)
        return dx.astype(dy.dtype, copy=False)

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        if train:
            self._cache = x > 0
        return relu(x)

    def backward(self, dy):
        return dy * self._take_cache()

    def describe(self):
        return {"kind": self.kind}


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, window=3, stride=2):
        super().__init__()
        self.window, self.stride = window, stride

    def forward(self, x, train=False):
        out, idx = _pool_forward(x, self.window, self.stride)
        if train:
            self._cache = (x.shape, idx)
        return out

    def backward(self, dy):
        x_shape, idx = self._take_cache()
        k, s = self.window, self.stride
        ho, wo = dy.shape[2:]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dy * (idx == pos)
        return dx

    def describe(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


def _adaptive_bounds(size, out):
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


class AdaptiveAvgPool2d(Layer):
    kind = "adaptive_avg_pool"

    def __init__(self, output_size):
        super().__init__()
        self.output_size = tuple(output_size)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        oh, ow = self.output_size
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        for i, (r0, r1) in enumerate(_adaptive_bounds(h, oh)):
            for j, (c0, c1) in enumerate(_adaptive_bounds(w, ow)):
                out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        if train:
            self._cache = x.shape
        return out

    def backward(self, dy):
        n, c, h, w = self._take_cache()
        oh, ow = self.output_size
        dx = np.zeros((n, c, h, w), dtype=dy.dtype)
        for i, (r0, r1) in enumerate(_adaptive_bounds(h, oh)):
            for j, (c0, c1) in enumerate(_adaptive_bounds(w, ow)):
                area = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] += (dy[:, :, i, j] / area)[:, :, None, None]
        return dx

    def describe(self):
        return {"kind": self.kind, "output_size": list(self.output_size)}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())

    def describe(self):
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(6.0 / n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype))
        self.bias = Parameter(np.zeros(n_out, dtype))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        out = dense(x, self.weight.value, self.bias.value)
        if train:
            self._cache = x
        return out

    def backward(self, dy):
        x = self._take_cache()
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class Dropout(Layer):
    """Inverted dropout: identity in eval mode."""

    kind = "dropout"

    def __init__(self, p_drop=0.5, rng=None):
        super().__init__()
        if not 0 <= p_drop < 1:
            raise InvalidHyperparameterError(f"p_drop must lie in [0, 1), got {p_drop}")
        self.p_drop = p_drop
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def _mask(self, shape, dtype):
        keep = self.rng.random(shape) >= self.p_drop
        return keep.astype(dtype) / (1 - self.p_drop)

    def forward(self, x, train=False):
        if not train or self.p_drop == 0:
            if train:
                self._cache = None, True
            return x
        mask = self._mask(x.shape, x.dtype)
        self._cache = mask, False
        return x * mask

    def backward(self, dy):
        mask, identity = self._take_cache()
        return dy if identity else dy * mask

    def describe(self):
        return {"kind": self.kind, "p_drop": self.p_drop}


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *named_layers):
        super().__init__()
        self.named_layers = list(named_layers)

    def children(self):
        return iter(self.named_layers)

    def forward(self, x, train=False):
        for _, layer in self.named_layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.named_layers):
            dy = layer.backward(dy)
        return dy

    def describe(self):
        out = []
        for n, layer in self.named_layers:
            d = layer.describe()
            out.append({"name": n, "kind": layer.kind, "layers": d} if isinstance(d, list) else {"name": n, **d})
        return out


class ResidualBlock(Layer):
    """Bottleneck block: 1x1 reduce, kxk, 1x1 expand, identity shortcut.

    Convolutions feed batch norm and therefore carry no bias.
    """

    kind = "residual_block"

    def __init__(self, channels, kernel=3, rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        if channels % 4:
            raise InvalidHyperparameterError(
                f"residual block channels must be divisible by 4, got {channels}")
        if kernel % 2 == 0:
            raise InvalidHyperparameterError(f"residual block kernel must be odd, got {kernel}")
        mid = channels // 4
        self.channels, self.kernel = channels, kernel
        self.path = Sequential(
            ("conv1", Conv2d(channels, mid, 1, bias=False, rng=rng, dtype=dtype)),
            ("bn1", BatchNorm2d(mid, dtype=dtype)),
            ("relu1", ReLU()),
            ("conv2", Conv2d(mid, mid, kernel, padding=kernel // 2, bias=False, rng=rng, dtype=dtype)),
            ("bn2", BatchNorm2d(mid, dtype=dtype)),
            ("relu2", ReLU()),
            ("conv3", Conv2d(mid, channels, 1, bias=False, rng=rng, dtype=dtype)),
            ("bn3", BatchNorm2d(channels, dtype=dtype)),
        )
        self.out_relu = ReLU()

    def children(self):
        return iter(self.path.named_layers)

    def forward(self, x, train=False):
        return self.out_relu.forward(self.path.forward(x, train) + x, train)

    def backward(self, dy):
        d_sum = self.out_relu.backward(dy)
        return self.path.backward(d_sum) + d_sum

    def layers(self):
        yield self
        yield from self.path.layers()
        yield self.out_relu

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "kernel": self.kernel,
                "layers": self.path.describe() + [{"name": "add"}, {"name": "relu", "kind": "relu"}]}


def backward(graph: Layer, loss_grad):
    """Propagate ``loss_grad`` through a recorded forward pass of ``graph``.

    Parameter gradients are accumulated into ``Parameter.grad``; the gradient
    with respect to the graph input is returned.
    """
    return graph.backward(loss_grad)


def sgd_step(params: Iterable[Parameter], lr=SGD_LR, momentum=SGD_MOMENTUM,
             weight_decay=SGD_WEIGHT_DECAY):
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        if momentum:
            p.momentum_buffer *= momentum
            p.momentum_buffer += g
            step = p.momentum_buffer
        else:
            p.momentum_buffer[...] = g
            step = g
        p.value -= (lr * step).astype(p.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check_report(layer, inputs, eps=1e-6, *, max_entries=32, seed=0, check_inputs=True):
    """Compare analytic and central-difference gradients.

    The scalar objective is ``sum(output * R)`` for a fixed random ``R``.
    ``inputs`` is one array or a tuple of arrays forwarded as ``layer.forward``'s
    first argument. At most ``max_entries`` random coordinates are probed per
    tensor. Returns ``{tensor name: max relative error}``.
    """
    params = dict(layer.named_parameters())
    for name, p in params.items():
        if p.value.dtype != np.float64:
            raise TypeError(f"grad_check needs 64-bit mode; {name} is {p.value.dtype}")
    multi = isinstance(inputs, tuple)
    xs = [np.array(a, dtype=np.float64) for a in (inputs if multi else (inputs,))]
    rng = np.random.default_rng(seed)
    saved = {n: b.copy() for n, b in layer.named_buffers()}

    def objective():
        out = layer.forward(tuple(xs) if multi else xs[0], train=True)
        layer.release()
        return float(np.sum(out * proj))

    out = layer.forward(tuple(xs) if multi else xs[0], train=True)
    proj = rng.standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(proj)
    dxs = list(dx) if multi else [dx]

    targets = [(name, p.value, p.grad) for name, p in params.items()]
    if check_inputs:
        targets += [(f"input{i}", x, d) for i, (x, d) in enumerate(zip(xs, dxs))]

    report = {}
    for name, arr, grad in targets:
        flat = arr.reshape(-1)
        count = min(max_entries, flat.size) if max_entries else flat.size
        picks = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = objective()
            flat[idx] = orig - eps
            f_minus = objective()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, _relative_error(float(grad.reshape(-1)[idx]), numeric))
        report[name] = worst
    for n, b in layer.named_buffers():
        b[...] = saved[n]
    layer.release()
    return report


def grad_check(layer, inputs, eps=1e-6, **kwargs) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    report = grad_check_report(layer, inputs, eps, **kwargs)
    return max(report.values()) if report else 0.0
