"""Layers with hand-written backward passes.

Tensors are numpy arrays in NHWC layout. Every layer caches what it needs in
``forward`` and consumes it in ``backward``; parameter gradients accumulate into
``Parameter.grad`` so several backward passes through one layer add up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError, StateError

# set True to check every forward output for NaN/inf
CHECK_FINITE = False


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def create(cls, name: str, value: np.ndarray) -> "Parameter":
        return cls(name, value, np.zeros_like(value))

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _check(name, out):
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output in layer {name}")
    return out


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for 'same' convolution."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation with 'same' padding. ``w`` is (k, k, C_in, C_out).

    Returns the output and the strided windows (for the weight gradient).
    """
    n, h, wd, c = x.shape
    k = w.shape[0]
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(wd, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    # win: (N, oh, ow, C, k, k)
    out = np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out, win


def conv2d_backward_data(g: np.ndarray, w: np.ndarray, stride: int, in_shape) -> np.ndarray:
    """Gradient of :func:`conv2d_forward` with respect to its input."""
    n, h, wd, c = in_shape
    k = w.shape[0]
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(wd, k, stride)
    if g.shape[1:3] != (oh, ow):
        raise DimensionError(f"gradient spatial shape {g.shape[1:3]} does not match ({oh}, {ow})")
    dcols = np.tensordot(g, w.transpose(2, 0, 1, 3), axes=([3], [3]))  # (N, oh, ow, C, k, k)
    dxp = np.zeros((n, h + pt + pb, wd + pl + pr, c), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[..., i, j]
    return dxp[:, pt : pt + h, pl : pl + wd, :]


def conv2d_backward_weight(win: np.ndarray, g: np.ndarray) -> np.ndarray:
    dw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (C, k, k, F)
    return dw.transpose(1, 2, 0, 3)


class Layer:
    name = "layer"

    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self, attr):
        val = getattr(self, attr, None)
        if val is None:
            raise StateError(f"{self.name}: backward called before forward")
        return val


def _init_weight(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2D(Layer):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, dtype=np.float32, name="conv"):
        self.name = name
        self.stride = stride
        self.c_in, self.c_out = c_in, c_out
        fan_in = kernel * kernel * c_in
        self.w = Parameter.create(f"{name}.w", _init_weight(rng, (kernel, kernel, c_in, c_out), fan_in, dtype))
        self.b = Parameter.create(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._win = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise DimensionError(f"{self.name}: expected N x H x W x {self.c_in}, got {x.shape}")
        out, self._win = conv2d_forward(x, self.w.value, self.stride)
        self._in_shape = x.shape
        return _check(self.name, out + self.b.value)

    def backward(self, g):
        win = self._cached("_win")
        self.w.grad += conv2d_backward_weight(win, g)
        self.b.grad += g.sum(axis=(0, 1, 2))
        return conv2d_backward_data(g, self.w.value, self.stride, self._in_shape)


class ConvTranspose2D(Layer):
    """Adjoint of a stride-2 'same' convolution: doubles spatial size.

    The kernel is stored as (k, k, C_out, C_in), i.e. the kernel of the
    convolution that this layer transposes.
    """

    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, dtype=np.float32, name="deconv"):
        self.name = name
        self.stride = stride
        self.c_in, self.c_out = c_in, c_out
        fan_in = kernel * kernel * c_in / (stride * stride)
        self.w = Parameter.create(f"{name}.w", _init_weight(rng, (kernel, kernel, c_out, c_in), fan_in, dtype))
        self.b = Parameter.create(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise DimensionError(f"{self.name}: expected N x H x W x {self.c_in}, got {x.shape}")
        n, h, w, _ = x.shape
        out_shape = (n, h * self.stride, w * self.stride, self.c_out)
        self._x = x
        out = conv2d_backward_data(x, self.w.value, self.stride, out_shape)
        return _check(self.name, out + self.b.value)

    def backward(self, g):
        x = self._cached("_x")
        dx, win = conv2d_forward(g, self.w.value, self.stride)
        self.w.grad += conv2d_backward_weight(win, x)
        self.b.grad += g.sum(axis=(0, 1, 2))
        return dx


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name="bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter.create(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter.create(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._xhat = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]

    def forward(self, x, training=True):
        if x.shape[-1] != self.gamma.value.shape[0]:
            raise DimensionError(f"{self.name}: expected {self.gamma.value.shape[0]} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        self._inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self._xhat = (x - mean) * self._inv_std
        self._training = training
        return _check(self.name, self.gamma.value * self._xhat + self.beta.value)

    def backward(self, g):
        xhat = self._cached("_xhat")
        axes = tuple(range(g.ndim - 1))
        self.gamma.grad += (g * xhat).sum(axis=axes)
        self.beta.grad += g.sum(axis=axes)
        dxhat = g * self.gamma.value
        if not self._training:
            return dxhat * self._inv_std
        count = g.size // g.shape[-1]
        return (self._inv_std / count) * (
            count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )


class LeakyReLU(Layer):
    def __init__(self, alpha=0.2, name="lrelu"):
        self.alpha = alpha
        self.name = name
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        return np.where(x > 0, x, self.alpha * x)

    def backward(self, g):
        x = self._cached("_x")
        return np.where(x > 0, g, self.alpha * g)


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        return np.maximum(x, 0)

    def backward(self, g):
        x = self._cached("_x")
        return np.where(x > 0, g, 0).astype(g.dtype)


class Tanh(Layer):
    def __init__(self, name="tanh"):
        self.name = name
        self._y = None

    def forward(self, x, training=True):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        y = self._cached("_y")
        return g * (1 - y * y)


class Sigmoid(Layer):
    def __init__(self, name="sigmoid"):
        self.name = name
        self._y = None

    def forward(self, x, training=True):
        e = np.exp(-np.abs(x))
        self._y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return self._y

    def backward(self, g):
        y = self._cached("_y")
        return g * y * (1 - y)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, training=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._cached("_shape"))


class Dense(Layer):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, name="dense"):
        self.name = name
        self.d_in = d_in
        self.w = Parameter.create(f"{name}.w", _init_weight(rng, (d_in, d_out), d_in, dtype))
        self.b = Parameter.create(f"{name}.b", np.zeros(d_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, training=True):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"{self.name}: expected N x {self.d_in}, got {x.shape}")
        self._x = x
        return _check(self.name, x @ self.w.value + self.b.value)

    def backward(self, g):
        x = self._cached("_x")
        self.w.grad += x.T @ g
        self.b.grad += g.sum(axis=0)
        return g @ self.w.value.T


class Sequential(Layer):
    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()
