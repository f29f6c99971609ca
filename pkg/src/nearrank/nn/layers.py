"""Layers with hand-written backward passes.

Images travel as ``(batch, channels, height, width)`` arrays and dense
activations as ``(batch, features)``.  Every layer caches what its backward
pass needs during :meth:`forward` and fills ``grads`` (same keys as
``params``) during :meth:`backward`.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Layer",
    "Dense",
    "Conv2D",
    "MaxPool2D",
    "BatchNorm",
    "Activation",
    "Flatten",
]

# samples per im2col block; bounds peak memory of the patch matrix
CONV_CHUNK = 256


def fan_in_uniform(rng, shape, fan_in):
    """He-style uniform init on ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def describe(self):
        return {"kind": self.kind}


class Dense(Layer):
    """``y = x W^T (+ b)`` with ``W`` of shape ``(units, in_features)``."""

    kind = "dense"

    def __init__(self, in_features, units, bias=False, rng=None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_features, self.units, self.bias = in_features, units, bias
        self.params["W"] = fan_in_uniform(rng, (units, in_features), in_features)
        if bias:
            self.params["b"] = np.zeros(units)

    def forward(self, x, train=True):
        self._x = x
        y = x @ self.params["W"].T
        if self.bias:
            y = y + self.params["b"]
        return y

    def backward(self, grad):
        self.grads["W"] = grad.T @ self._x
        if self.bias:
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"]

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"dense layer expects ({self.in_features},), got {in_shape}")
        return (self.units,)

    def describe(self):
        return {"kind": self.kind, "units": self.units, "bias": self.bias}


class Conv2D(Layer):
    """Valid (optionally zero-padded) 2-D convolution, weights ``(out, in, kh, kw)``."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=False, rng=None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if kh < 1 or kw < 1 or stride < 1:
            raise ValueError("kernel dims and stride must be >= 1")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kh, self.kw, self.stride, self.padding, self.bias = kh, kw, stride, padding, bias
        # the first layer of a network never needs d(loss)/d(input)
        self.input_grad = True
        fan_in = in_channels * kh * kw
        self.params["W"] = fan_in_uniform(rng, (out_channels, in_channels, kh, kw), fan_in)
        if bias:
            self.params["b"] = np.zeros(out_channels)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _cols(self, xp):
        """im2col block ``(b, C*kh*kw, Ho*Wo)`` for a padded input chunk."""
        s = self.stride
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(2, 3))[:, :, ::s, ::s]
        b, c, ho, wo = win.shape[:4]
        return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, -1, ho * wo)

    def forward(self, x, train=True):
        xp = self._pad(x)
        self._xp = xp
        wm = self.params["W"].reshape(self.out_channels, -1)
        out_h, out_w = self.output_shape(x.shape[1:])[1:]
        y = np.empty((x.shape[0], self.out_channels, out_h, out_w))
        for lo in range(0, x.shape[0], CONV_CHUNK):
            cols = self._cols(xp[lo:lo + CONV_CHUNK])
            y[lo:lo + CONV_CHUNK] = np.matmul(wm, cols).reshape(-1, self.out_channels, out_h, out_w)
        if self.bias:
            y += self.params["b"][None, :, None, None]
        return y

    def backward(self, grad):
        w = self.params["W"]
        wm = w.reshape(self.out_channels, -1)
        xp = self._xp
        self._xp = None
        s, kh, kw = self.stride, self.kh, self.kw
        out_h, out_w = grad.shape[2:]
        dwm = np.zeros_like(wm)
        dxp = np.zeros(xp.shape) if self.input_grad else None
        for lo in range(0, grad.shape[0], CONV_CHUNK):
            g = grad[lo:lo + CONV_CHUNK].reshape(-1, self.out_channels, out_h * out_w)
            cols = self._cols(xp[lo:lo + CONV_CHUNK])
            dwm += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            if dxp is None:
                continue
            dcols = np.matmul(wm.T, g).reshape(-1, self.in_channels, kh, kw, out_h, out_w)
            dx = dxp[lo:lo + CONV_CHUNK]
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[:, :, i, j]
        self.grads["W"] = dwm.reshape(w.shape)
        if self.bias:
            self.grads["b"] = grad.sum(axis=(0, 2, 3))
        if dxp is None:
            return None
        p = self.padding
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        h += 2 * self.padding
        w += 2 * self.padding
        if h < self.kh or w < self.kw:
            raise ValueError(f"input {in_shape} smaller than kernel ({self.kh}, {self.kw})")
        return (self.out_channels, (h - self.kh) // self.stride + 1,
                (w - self.kw) // self.stride + 1)

    def describe(self):
        return {"kind": self.kind, "channels": self.out_channels,
                "kernel": [self.kh, self.kw], "stride": self.stride,
                "padding": self.padding, "bias": self.bias}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""

    kind = "pool"

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def _offsets(self):
        k = self.window
        return [(i, j) for i in range(k) for j in range(k)]

    def forward(self, x, train=True):
        k = self.window
        ho, wo = x.shape[2] // k, x.shape[3] // k
        views = [x[:, :, i:ho * k:k, j:wo * k:k] for i, j in self._offsets()]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        # first offset attaining the maximum wins
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for v in views:
            m = (v == out) & ~taken
            taken |= m
            masks.append(m)
        self._masks = masks
        self._xshape = x.shape
        return out

    def backward(self, grad):
        k = self.window
        ho, wo = grad.shape[2:]
        dx = np.zeros(self._xshape)
        for (i, j), m in zip(self._offsets(), self._masks):
            dx[:, :, i:ho * k:k, j:wo * k:k] = grad * m
        self._masks = None
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ValueError(f"input {in_shape} smaller than pool window {self.window}")
        return (c, h // self.window, w // self.window)

    def describe(self):
        return {"kind": self.kind, "window": self.window}


class BatchNorm(Layer):
    """Batch normalisation over the batch axis (and spatial axes for images).

    Train mode normalises with batch statistics and updates running
    statistics as ``running = momentum * running + (1 - momentum) * batch``;
    eval mode uses the running statistics.  Variance is the biased batch
    variance in both places.
    """

    kind = "batchnorm"

    def __init__(self, features, momentum=0.9, eps=1e-5):
        super().__init__()
        self.features, self.momentum, self.eps = features, momentum, eps
        self.params["gamma"] = np.ones(features)
        self.params["beta"] = np.zeros(features)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    @staticmethod
    def _as3(x):
        # (B, F) -> (B, F, 1); (B, C, H, W) -> (B, C, H*W)
        return x.reshape(x.shape[0], x.shape[1], -1)

    def normalize(self, x, train=True):
        """Return ``(xhat, mean, var)``: the input before scale and shift."""
        x3 = self._as3(x)
        if train:
            n = x3.shape[0] * x3.shape[2]
            mean = np.einsum("bcp->c", x3) / n
            xc = x3 - mean[:, None]
            var = np.einsum("bcp,bcp->c", xc, xc) / n
        else:
            mean, var = self.running_mean, self.running_var
            xc = x3 - mean[:, None]
        xhat = xc / np.sqrt(var + self.eps)[:, None]
        return xhat.reshape(x.shape), mean, var

    def forward(self, x, train=True):
        x3 = self._as3(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            n = x3.shape[0] * x3.shape[2]
            mean = np.einsum("bcp->c", x3) / n
            xc = x3 - mean[:, None]
            var = np.einsum("bcp,bcp->c", xc, xc) / n
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
            inv = 1.0 / np.sqrt(var + self.eps)
            self._xc, self._inv, self._shape = xc, inv, x.shape
        else:
            xc = x3 - self.running_mean[:, None]
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
        y = xc * (gamma * inv)[:, None]
        y += beta[:, None]
        return y.reshape(x.shape)

    def backward(self, grad):
        xc, inv = self._xc, self._inv
        g3 = self._as3(grad)
        n = g3.shape[0] * g3.shape[2]
        gamma = self.params["gamma"]
        sum_g = np.einsum("bcp->c", g3)
        sum_gxc = np.einsum("bcp,bcp->c", g3, xc)
        self.grads["gamma"] = sum_gxc * inv
        self.grads["beta"] = sum_g
        a = gamma * inv
        coef = -gamma * inv ** 3 * sum_gxc / n
        dx = g3 * a[:, None]
        dx += xc * coef[:, None]
        dx -= (a * sum_g / n)[:, None]
        self._xc = None
        return dx.reshape(self._shape)

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {"kind": self.kind, "features": self.features, "momentum": self.momentum}


class Activation(Layer):
    """Element-wise ``relu`` or ``linear`` (identity) nonlinearity."""

    kind = "activation"
    KINDS = ("relu", "linear")

    def __init__(self, fn="relu"):
        super().__init__()
        if fn not in self.KINDS:
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, train=True):
        if self.fn == "linear":
            return x
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        if self.fn == "linear":
            return grad
        return grad * self._mask

    def describe(self):
        return {"kind": self.kind, "fn": self.fn}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)
