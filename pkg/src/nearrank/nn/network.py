"""Sequential networks and the architecture builders.

A :class:`Network` is an ordered list of layers plus bookkeeping.  Layers
flagged ``capture`` emit the hidden representation ``H(X)^l`` used by the
rank diagnostics: ``(units, batch)`` for dense layers and
``(height, width, channels, batch)`` for convolutional ones.
"""

import numpy as np

from .layers import Activation, BatchNorm, Conv2D, Dense, Flatten, Layer, MaxPool2D

__all__ = ["GlobalAvgPool", "Network", "ResidualBlock", "build_network", "forward", "ARCHITECTURES"]

ARCHITECTURES = ("lenet5", "mlp", "vgg16", "resnet56")


def _to_column_layout(h):
    """Batch-first activation -> batch-last ``H(X)^l`` layout."""
    if h.ndim == 2:
        return h.T
    return h.transpose(2, 3, 1, 0)


class ResidualBlock(Layer):
    """Two 3x3 conv(+BN) stages with an identity shortcut.

    Downsampling blocks use stride 2 and a parameter-free shortcut that
    subsamples and zero-pads channels.
    """

    kind = "residual"

    def __init__(self, in_channels, out_channels, stride, batchnorm, activation, rng):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        body = [Conv2D(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng)]
        if batchnorm:
            body.append(BatchNorm(out_channels))
        body.append(Activation(activation))
        body.append(Conv2D(out_channels, out_channels, 3, padding=1, rng=rng))
        if batchnorm:
            body.append(BatchNorm(out_channels))
        self.body = body
        self.out_act = Activation(activation)

    def sublayers(self):
        return self.body + [self.out_act]

    def _shortcut(self, x):
        if self.stride == 1 and self.in_channels == self.out_channels:
            return x
        x = x[:, :, ::self.stride, ::self.stride]
        extra = self.out_channels - self.in_channels
        lo = extra // 2
        return np.pad(x, ((0, 0), (lo, extra - lo), (0, 0), (0, 0)))

    def forward(self, x, train=True):
        h = x
        for layer in self.body:
            h = layer.forward(h, train)
        return self.out_act.forward(h + self._shortcut(x), train)

    def backward(self, grad):
        grad = self.out_act.backward(grad)
        g = grad
        for layer in reversed(self.body):
            g = layer.backward(g)
        if self.stride == 1 and self.in_channels == self.out_channels:
            return g + grad
        extra = self.out_channels - self.in_channels
        lo = extra // 2
        short = grad[:, lo:lo + self.in_channels]
        g[:, :, ::self.stride, ::self.stride] += short
        return g

    def output_shape(self, in_shape):
        shape = in_shape
        for layer in self.body:
            shape = layer.output_shape(shape)
        return shape

    def describe(self):
        return {"kind": self.kind, "channels": self.out_channels, "stride": self.stride}


class Network:
    """Ordered layers mapping ``(batch, C, H, W)`` images to ``(batch, classes)`` logits."""

    def __init__(self, layers, input_shape, classes, arch, init_seed, options=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.arch = arch
        self.init_seed = init_seed
        self.options = dict(options or {})
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (classes,):
            raise ValueError(f"network output shape {shape} != ({classes},)")
        first = self.layers[0]
        if isinstance(first, Conv2D):
            first.input_grad = False

    def all_layers(self):
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                yield from layer.sublayers()
            else:
                yield layer

    def parameters(self):
        """``(name, layer, key)`` triples in a fixed order."""
        out = []
        for i, layer in enumerate(self.all_layers()):
            for key in layer.params:
                out.append((f"{i}.{layer.kind}.{key}", layer, key))
        return out

    def param_shapes(self):
        return [(name, layer.params[key].shape) for name, layer, key in self.parameters()]

    def n_params(self):
        return int(sum(layer.params[key].size for _, layer, key in self.parameters()))

    def batchnorm_layers(self):
        return [layer for layer in self.all_layers() if isinstance(layer, BatchNorm)]

    def prepare(self, batch):
        """Accept ``(B, H, W, C)`` dataset images or ``(B, C, H, W)`` arrays."""
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 4 and x.shape[1:] != self.input_shape:
            x = x.transpose(0, 3, 1, 2)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"batch shape {x.shape[1:]} does not match input {self.input_shape}")
        return x

    def __call__(self, x, train=True, capture=False):
        """Forward pass on a prepared batch; returns ``(logits, captured)``."""
        captured = [] if capture else None
        for layer in self.layers:
            x = layer.forward(x, train)
            if capture and getattr(layer, "capture", False):
                captured.append(_to_column_layout(x))
        return x, captured

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def get_state(self):
        """Copy of all parameters and batch-norm statistics."""
        state = {name: layer.params[key].copy() for name, layer, key in self.parameters()}
        for i, bn in enumerate(self.batchnorm_layers()):
            state[f"bn{i}.running_mean"] = bn.running_mean.copy()
            state[f"bn{i}.running_var"] = bn.running_var.copy()
        return state

    def set_state(self, state):
        for name, layer, key in self.parameters():
            layer.params[key] = state[name].copy()
        for i, bn in enumerate(self.batchnorm_layers()):
            bn.running_mean = state[f"bn{i}.running_mean"].copy()
            bn.running_var = state[f"bn{i}.running_var"].copy()

    def describe(self):
        return {"arch": self.arch, "input_shape": list(self.input_shape), "classes": self.classes,
                "init": {"scheme": "fan_in_uniform sqrt(6/fan_in)", "seed": self.init_seed},
                "options": self.options, "layers": [layer.describe() for layer in self.layers]}


def forward(net, batch, capture=False, mode="eval"):
    """Run ``batch`` through ``net``.

    Returns ``(logits, activations)`` with logits of shape ``classes x b_s``
    and, when ``capture`` is set, the list of hidden representations in
    batch-last layout (``None`` otherwise).  Raises ``FloatingPointError``
    when the output is not finite.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    logits, acts = net(net.prepare(batch), train=(mode == "train"), capture=capture)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite network output")
    return logits.T, acts


class _Builder:
    def __init__(self, input_shape, batchnorm, activation, rng):
        self.shape = tuple(input_shape)
        self.batchnorm, self.activation, self.rng = batchnorm, activation, rng
        self.layers = []

    def add(self, layer):
        self.shape = layer.output_shape(self.shape)
        self.layers.append(layer)
        return layer

    def hidden(self, layer):
        """Weight layer followed by optional BN and the captured activation."""
        self.add(layer)
        if self.batchnorm:
            self.add(BatchNorm(self.shape[0]))
        act = self.add(Activation(self.activation))
        act.capture = True

    def conv(self, channels, kernel, padding=0):
        self.hidden(Conv2D(self.shape[0], channels, kernel, padding=padding, rng=self.rng))

    def dense(self, units):
        self.hidden(Dense(self.shape[0], units, rng=self.rng))

    def output(self, classes):
        self.add(Dense(self.shape[0], classes, rng=self.rng))


def build_network(arch="lenet5", input_shape=(1, 28, 28), classes=10, widths=None,
                  activation="relu", batchnorm=True, seed=0):
    """Build an architecture with deterministic initial parameters.

    ``lenet5``
        conv(6@5x5) -> pool -> conv(16@5x5) -> pool -> dense120 -> dense84
        -> dense(classes); valid convolutions, 2x2 max pooling.
    ``mlp``
        ``widths = [in, hidden..., classes]``; input is flattened.
    ``vgg16``, ``resnet56``
        CIFAR-style variants (3x3 kernels, padding 1).

    Biases are omitted everywhere; with ``batchnorm`` each weight layer
    except the output is followed by batch normalisation.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    b = _Builder(input_shape, batchnorm, activation, rng)

    if arch == "lenet5":
        b.conv(6, 5)
        b.add(MaxPool2D(2))
        b.conv(16, 5)
        b.add(MaxPool2D(2))
        b.add(Flatten())
        b.dense(120)
        b.dense(84)
        b.output(classes)
    elif arch == "mlp":
        if not widths or len(widths) < 2:
            raise ValueError("mlp needs widths=[in, ..., classes]")
        b.add(Flatten())
        if b.shape[0] != widths[0]:
            raise ValueError(f"mlp input width {widths[0]} != flattened input {b.shape[0]}")
        for units in widths[1:-1]:
            b.dense(units)
        classes = widths[-1]
        b.output(classes)
    elif arch == "vgg16":
        for block in ([64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]):
            for ch in block:
                b.conv(ch, 3, padding=1)
            b.add(MaxPool2D(2))
        b.add(Flatten())
        b.dense(512)
        b.dense(512)
        b.output(classes)
    else:
        b.conv(16, 3, padding=1)
        channels = 16
        for stage, out_ch in enumerate((16, 32, 64)):
            for i in range(9):
                stride = 2 if (stage > 0 and i == 0) else 1
                block = b.add(ResidualBlock(channels, out_ch, stride, batchnorm, activation, rng))
                block.capture = True
                channels = out_ch
        b.add(GlobalAvgPool())
        b.output(classes)

    options = {"activation": activation, "batchnorm": batchnorm}
    if widths:
        options["widths"] = list(widths)
    return Network(b.layers, input_shape, classes, arch, seed, options)


class GlobalAvgPool(Layer):
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""

    kind = "avgpool"

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()

    def output_shape(self, in_shape):
        return (in_shape[0],)
