"""Stateful layers with cached forward state and explicit backward passes.

Every layer exposes ``forward(x, training)`` and ``backward(grad)``. ``backward``
returns the gradient with respect to the layer input and accumulates parameter
gradients into ``Param.grad``. Calling ``backward`` before ``forward`` raises.
"""
from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import FLOAT32, child_seed, randn

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


def he_normal(shape, fan_in: int, seed: int, dtype) -> np.ndarray:
    return randn(shape, seed, stddev=math.sqrt(2.0 / fan_in), dtype=dtype)


class Layer:
    """Base class; subclasses fill ``_params`` and ``_buffers`` in declaration order."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Layer] = {}
        self._cache = None

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad[...] = 0

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache

    def __call__(self, x, training: bool = True):
        return self.forward(x, training)

    def forward(self, x, training: bool = True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Sequential(Layer):
    def __init__(self, layers=None, names=None):
        super().__init__()
        for i, layer in enumerate(layers or []):
            self.add_child(names[i] if names else str(i), layer)

    @property
    def layers(self) -> list[Layer]:
        return list(self._children.values())

    def forward(self, x, training: bool = True):
        for layer in self._children.values():
            x = layer.forward(x, training)
        self._cache = True
        return x

    def backward(self, grad):
        self._need_cache()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Conv3d(Layer):
    """Standard bias-free 3D convolution."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, *, seed=0, dtype=FLOAT32, bias=False):
        super().__init__()
        kernel = ops.triple(kernel)
        self.stride = ops.triple(stride)
        self.padding = ops.triple(padding)
        fan_in = cin * kernel[0] * kernel[1] * kernel[2]
        self._params["weight"] = Param(he_normal((cout, cin) + kernel, fan_in, seed, dtype))
        if bias:
            self._params["bias"] = Param(np.zeros(cout, dtype=dtype))

    def forward(self, x, training=True):
        w = self._params["weight"].data
        y = ops.conv3d(x, w, self.stride, self.padding)
        if "bias" in self._params:
            y += self._params["bias"].data[None, :, None, None, None]
        self._cache = x
        return y

    def backward(self, grad):
        x = self._need_cache()
        gx, gw = ops.conv3d_backward(grad, x, self._params["weight"].data, self.stride, self.padding)
        self._params["weight"].grad += gw
        if "bias" in self._params:
            self._params["bias"].grad += grad.sum(axis=(0, 2, 3, 4))
        return gx


class DepthwiseConv3d(Layer):
    def __init__(self, channels, kernel, stride=1, padding=0, *, seed=0, dtype=FLOAT32):
        super().__init__()
        kernel = ops.triple(kernel)
        self.stride = ops.triple(stride)
        self.padding = ops.triple(padding)
        fan_in = kernel[0] * kernel[1] * kernel[2]
        self._params["weight"] = Param(he_normal((channels,) + kernel, fan_in, seed, dtype))
        self._params["bias"] = Param(np.zeros(channels, dtype=dtype))

    def forward(self, x, training=True):
        self._cache = x
        return ops.depthwise3d(x, self._params["weight"].data, self._params["bias"].data,
                               self.stride, self.padding)

    def backward(self, grad):
        x = self._need_cache()
        gx, gw, gb = ops.depthwise3d_backward(grad, x, self._params["weight"].data,
                                              self.stride, self.padding)
        self._params["weight"].grad += gw
        self._params["bias"].grad += gb
        return gx


class PointwiseConv3d(Layer):
    def __init__(self, cin, cout, *, bias=True, seed=0, dtype=FLOAT32):
        super().__init__()
        self._params["weight"] = Param(he_normal((cout, cin), cin, seed, dtype))
        if bias:
            self._params["bias"] = Param(np.zeros(cout, dtype=dtype))

    def forward(self, x, training=True):
        self._cache = x
        b = self._params["bias"].data if "bias" in self._params else None
        return ops.pointwise(x, self._params["weight"].data, b)

    def backward(self, grad):
        x = self._need_cache()
        gx, gw, gb = ops.pointwise_backward(grad, x, self._params["weight"].data)
        self._params["weight"].grad += gw
        if "bias" in self._params:
            self._params["bias"].grad += gb
        return gx


class ConvTranspose3d(Layer):
    """Bias-free transposed convolution, weight ``(C_in, C_out, k, k, k)``."""

    def __init__(self, cin, cout, kernel, stride=1, *, seed=0, dtype=FLOAT32):
        super().__init__()
        kernel = ops.triple(kernel)
        self.stride = ops.triple(stride)
        # each output voxel sees ceil(k/s)^3 taps per input channel
        taps = 1
        for k, s in zip(kernel, self.stride):
            taps *= -(-k // s)
        self._params["weight"] = Param(he_normal((cin, cout) + kernel, cin * taps, seed, dtype))

    def forward(self, x, training=True):
        self._cache = x
        return ops.conv_transpose3d(x, self._params["weight"].data, self.stride)

    def backward(self, grad):
        x = self._need_cache()
        gx, gw = ops.conv_transpose3d_backward(grad, x, self._params["weight"].data, self.stride)
        self._params["weight"].grad += gw
        return gx


class BatchNorm(Layer):
    """Per-channel batch normalization over every non-channel axis.

    Training mode normalizes with biased batch statistics and moves the running
    estimates by ``momentum`` (the running variance uses the unbiased batch
    variance). Inference mode uses the running estimates.
    """

    def __init__(self, channels, *, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=FLOAT32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self._params["gamma"] = Param(np.ones(channels, dtype=dtype))
        self._params["beta"] = Param(np.zeros(channels, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=True):
        gamma = self._params["gamma"].data
        beta = self._params["beta"].data
        if training:
            mean, var, count = ops.batch_stats(x)
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mean
            rv[...] = (1 - m) * rv + m * var * (count / (count - 1))
        else:
            mean, var = self._buffers["running_mean"], self._buffers["running_var"]
        y, xhat = ops.batchnorm(x, gamma, beta, mean, var, self.eps)
        self._cache = (xhat, var, training)
        return y

    def backward(self, grad):
        xhat, var, training = self._need_cache()
        gx, gg, gb = ops.batchnorm_backward(grad, xhat, self._params["gamma"].data, var,
                                            self.eps, training)
        self._params["gamma"].grad += gg
        self._params["beta"].grad += gb
        return gx


class ReLU(Layer):
    def forward(self, x, training=True):
        self._cache = x
        return ops.relu(x)

    def backward(self, grad):
        return ops.relu_backward(grad, self._need_cache())


class Identity(Layer):
    def forward(self, x, training=True):
        self._cache = True
        return x

    def backward(self, grad):
        self._need_cache()
        return grad


class MaxPool3d(Layer):
    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x, training=True):
        y, arg = ops.maxpool3d(x, self.window, self.stride)
        self._cache = (arg, x.shape)
        return y

    def backward(self, grad):
        arg, shape = self._need_cache()
        return ops.maxpool3d_backward(grad, arg, shape, self.window, self.stride)


class Linear(Layer):
    def __init__(self, fin, fout, *, bias=True, seed=0, dtype=FLOAT32):
        super().__init__()
        self._params["weight"] = Param(he_normal((fin, fout), fin, seed, dtype))
        if bias:
            self._params["bias"] = Param(np.zeros(fout, dtype=dtype))

    def forward(self, x, training=True):
        self._cache = x
        b = self._params["bias"].data if "bias" in self._params else None
        return ops.fully_connected(x, self._params["weight"].data, b)

    def backward(self, grad):
        x = self._need_cache()
        gx, gw, gb = ops.fully_connected_backward(grad, x, self._params["weight"].data)
        self._params["weight"].grad += gw
        if "bias" in self._params:
            self._params["bias"].grad += gb
        return gx


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, training=True):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Flatten(Reshape):
    def __init__(self):
        super().__init__((-1,))


# ------------------------------------------------------------------ conv units

def _act(activation):
    return ReLU() if activation else Identity()


class StandardConv(Sequential):
    """conv -> BN -> ReLU."""

    def __init__(self, cin, cout, k=3, *, padding=None, stride=1, activation=True,
                 batchnorm=True, seed=0, dtype=FLOAT32):
        pad = k // 2 if padding is None else padding
        super().__init__()
        self.add_child("conv", Conv3d(cin, cout, k, stride, pad, seed=child_seed(seed, 0), dtype=dtype))
        if batchnorm:
            self.add_child("bn", BatchNorm(cout, dtype=dtype))
        self.add_child("act", _act(activation))


class DepthwiseSeparable3d(Sequential):
    """depthwise -> BN -> ReLU -> pointwise -> BN -> ReLU.

    ``activation`` controls only the final ReLU; ``inner_activation=False`` and
    ``batchnorm=False`` strip the composite down to the bare factorized linear map.
    """

    def __init__(self, cin, cout, k=3, *, padding=None, stride=1, activation=True,
                 inner_activation=True, batchnorm=True, seed=0, dtype=FLOAT32):
        pad = k // 2 if padding is None else padding
        super().__init__()
        self.add_child("dw", DepthwiseConv3d(cin, k, stride, pad, seed=child_seed(seed, 0), dtype=dtype))
        if batchnorm:
            self.add_child("bn1", BatchNorm(cin, dtype=dtype))
        self.add_child("act1", _act(inner_activation))
        self.add_child("pw", PointwiseConv3d(cin, cout, seed=child_seed(seed, 1), dtype=dtype))
        if batchnorm:
            self.add_child("bn2", BatchNorm(cout, dtype=dtype))
        self.add_child("act2", _act(activation))


class Pseudo3d(Sequential):
    """Horizontal (1,k,k) conv with full channel mixing -> BN -> ReLU ->
    vertical (k,1,1) conv -> BN -> ReLU. Both convolutions are bias-free."""

    def __init__(self, cin, cout, k=3, *, padding=None, activation=True,
                 inner_activation=True, batchnorm=True, seed=0, dtype=FLOAT32):
        p = k // 2 if padding is None else padding
        super().__init__()
        self.add_child("horizontal", Conv3d(cin, cin, (1, k, k), 1, (0, p, p),
                                            seed=child_seed(seed, 0), dtype=dtype))
        if batchnorm:
            self.add_child("bn1", BatchNorm(cin, dtype=dtype))
        self.add_child("act1", _act(inner_activation))
        self.add_child("vertical", Conv3d(cin, cout, (k, 1, 1), 1, (p, 0, 0),
                                          seed=child_seed(seed, 1), dtype=dtype))
        if batchnorm:
            self.add_child("bn2", BatchNorm(cout, dtype=dtype))
        self.add_child("act2", _act(activation))


FLAVORS = ("standard", "pseudo", "dw")
_FLAVOR_ALIASES = {"standard": "standard", "std": "standard", "pseudo": "pseudo", "p3d": "pseudo",
                   "dw": "dw", "depthwise": "dw"}


def canonical_flavor(flavor: str) -> str:
    try:
        return _FLAVOR_ALIASES[flavor.lower()]
    except KeyError:
        raise ValueError(f"unknown conv flavor {flavor!r}; expected one of {FLAVORS}") from None


def conv_unit(flavor: str, cin: int, cout: int, k: int = 3, **kw) -> Sequential:
    flavor = canonical_flavor(flavor)
    if flavor == "standard":
        kw.pop("inner_activation", None)
        return StandardConv(cin, cout, k, **kw)
    if flavor == "pseudo":
        return Pseudo3d(cin, cout, k, **kw)
    return DepthwiseSeparable3d(cin, cout, k, **kw)


class ConvBlock(Layer):
    """Chained conv units of one flavor, optionally with an identity skip.

    The residual variant adds the block input to the second unit's
    normalized output and applies the final ReLU afterwards.
    """

    def __init__(self, channels, flavor="standard", *, residual=False, units=2, k=3,
                 seed=0, dtype=FLOAT32):
        super().__init__()
        self.residual = residual
        for i in range(units):
            last = i == units - 1
            self.add_child(f"unit{i}", conv_unit(flavor, channels, channels, k,
                                                 activation=not (residual and last),
                                                 seed=child_seed(seed, i), dtype=dtype))
        self.final_act = ReLU() if residual else None

    def forward(self, x, training=True):
        y = x
        for unit in self._children.values():
            y = unit.forward(y, training)
        if self.residual:
            y = self.final_act.forward(y + x, training)
        self._cache = True
        return y

    def backward(self, grad):
        self._need_cache()
        if self.residual:
            grad = self.final_act.backward(grad)
            skip = grad
        for unit in reversed(list(self._children.values())):
            grad = unit.backward(grad)
        if self.residual:
            grad = grad + skip
        return grad
