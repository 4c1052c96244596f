"""Feed-forward embedding networks with hand-derived backward passes.

Layers operate on channels-last float64 arrays: images are (batch, H, W,
channels), flat features are (batch, dim). Convolution is evaluated as a
sum of kernel-position GEMMs, which on small CPUs beats materializing
im2col columns; a naive loop oracle in the tests pins the arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ParameterError, ShapeError
from .numerics import Rng

# Gaussian weight init scaled by fan-in (std = sqrt(2 / fan_in)); a fixed
# small std stalls deep stacks at the uniform-prediction plateau for the
# learning rates used here, which the test suite would catch as a frozen
# training loss.
PRELU_INIT_SLOPE = 0.25


def _init_std(fan_in: int) -> float:
    return (2.0 / fan_in) ** 0.5


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description used for construction and checkpoints."""

    kind: str  # conv | maxpool | prelu | fullyconnected
    out_channels: int = 0
    in_channels: int = 0
    kernel: int = 5
    stride: int = 1
    padding: int = 2
    window: int = 2
    channels: int = 0          # prelu slope count
    in_features: int = 0       # fullyconnected
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "prelu", "fullyconnected"):
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and min(self.out_channels, self.in_channels,
                                       self.kernel, self.stride) < 1:
            raise ParameterError("conv geometry must be positive")
        if self.kind == "maxpool" and self.window < 1:
            raise ParameterError("pool window must be positive")


class Conv2D:
    def __init__(self, spec: LayerSpec, rng: Optional[Rng] = None):
        self.spec = spec
        k, ci, co = spec.kernel, spec.in_channels, spec.out_channels
        if rng is None:
            self.weight = np.zeros((k, k, ci, co))
        else:
            self.weight = rng.normal_array((k, k, ci, co)) * _init_std(k * k * ci)
        self.bias = np.zeros(co)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_hw(self, h, w):
        s, k, p = self.spec.stride, self.spec.kernel, self.spec.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv reduces {h}x{w} to {oh}x{ow}")
        return oh, ow

    def _small_patch(self):
        # rank-deficient GEMMs (tiny k*k*cin) run faster through explicit
        # column matrices than through 25 thin products
        s = self.spec
        return s.kernel * s.kernel * s.in_channels <= 200

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.spec.in_channels:
            raise ShapeError(
                f"conv expects (b, h, w, {self.spec.in_channels}), got {x.shape}")
        b, h, w, ci = x.shape
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.padding
        co = self.spec.out_channels
        oh, ow = self.out_hw(h, w)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        if self._small_patch():
            cols = np.empty((b, oh, ow, k, k, ci))
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = xp[:, i:i + s * (oh - 1) + 1:s,
                                                j:j + s * (ow - 1) + 1:s, :]
            y = cols.reshape(-1, k * k * ci) @ self.weight.reshape(-1, co)
        else:
            y = np.zeros((b * oh * ow, co))
            for i in range(k):
                for j in range(k):
                    sl = xp[:, i:i + s * (oh - 1) + 1:s,
                            j:j + s * (ow - 1) + 1:s, :].reshape(-1, ci)
                    y += sl @ self.weight[i, j]
        y += self.bias
        return y.reshape(b, oh, ow, co), xp

    def backward(self, xp, dy, need_input_grad=True):
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.padding
        ci, co = self.spec.in_channels, self.spec.out_channels
        b, oh, ow, _ = dy.shape
        dyf = dy.reshape(-1, co)
        dw = np.empty_like(self.weight)
        dxp = np.zeros_like(xp) if need_input_grad else None
        if self._small_patch():
            cols = np.empty((b, oh, ow, k, k, ci))
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = xp[:, i:i + s * (oh - 1) + 1:s,
                                                j:j + s * (ow - 1) + 1:s, :]
            dw[:] = (cols.reshape(-1, k * k * ci).T @ dyf).reshape(dw.shape)
            if need_input_grad:
                dcols = (dyf @ self.weight.reshape(-1, co).T).reshape(
                    b, oh, ow, k, k, ci)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + s * (oh - 1) + 1:s,
                            j:j + s * (ow - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        else:
            for i in range(k):
                for j in range(k):
                    rows = slice(i, i + s * (oh - 1) + 1, s)
                    cols = slice(j, j + s * (ow - 1) + 1, s)
                    sl = xp[:, rows, cols, :].reshape(-1, ci)
                    dw[i, j] = sl.T @ dyf
                    if need_input_grad:
                        dxp[:, rows, cols, :] += (
                            dyf @ self.weight[i, j].T).reshape(b, oh, ow, ci)
        db = dyf.sum(axis=0)
        dx = None
        if need_input_grad:
            dx = dxp[:, p:-p or None, p:-p or None, :]
        return dx, {"weight": dw, "bias": db}


class MaxPool:
    """Square window with stride equal to the window (floor geometry)."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def params(self):
        return {}

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool expects 4-d input, got {x.shape}")
        w = self.spec.window
        b, h, ww, c = x.shape
        oh, ow = h // w, ww // w
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {w} too large for {h}x{ww}")
        v = x[:, :oh * w, :ow * w, :].reshape(b, oh, w, ow, w, c)
        v = v.transpose(0, 1, 3, 2, 4, 5).reshape(b, oh, ow, w * w, c)
        idx = v.argmax(axis=3)
        out = np.take_along_axis(v, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        return out, (idx, x.shape)

    def backward(self, cache, dy):
        idx, xshape = cache
        w = self.spec.window
        b, h, ww, c = xshape
        oh, ow = h // w, ww // w
        dv = np.zeros((b, oh, ow, w * w, c))
        np.put_along_axis(dv, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        dv = dv.reshape(b, oh, ow, w, w, c).transpose(0, 1, 3, 2, 4, 5)
        dx = np.zeros(xshape)
        dx[:, :oh * w, :ow * w, :] = dv.reshape(b, oh * w, ow * w, c)
        return dx, {}


class PReLU:
    """Per-channel slopes on the trailing axis."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.slope = np.full(spec.channels, PRELU_INIT_SLOPE)

    def params(self):
        return {"slope": self.slope}

    def forward(self, x):
        if x.shape[-1] != self.spec.channels:
            raise ShapeError(
                f"prelu has {self.spec.channels} slopes, input has {x.shape[-1]} channels")
        neg = x < 0
        return np.where(neg, self.slope * x, x), (x, neg)

    def backward(self, cache, dy):
        x, neg = cache
        dx = np.where(neg, self.slope * dy, dy)
        dslope = np.where(neg, dy * x, 0.0).reshape(-1, self.spec.channels).sum(axis=0)
        return dx, {"slope": dslope}


class FullyConnected:
    """Linear layer; flattens any input to (batch, in_features)."""

    def __init__(self, spec: LayerSpec, rng: Optional[Rng] = None):
        self.spec = spec
        fi, fo = spec.in_features, spec.out_features
        self.weight = (rng.normal_array((fi, fo)) * _init_std(fi)
                       if rng is not None else np.zeros((fi, fo)))
        self.bias = np.zeros(fo)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        if flat.shape[1] != self.spec.in_features:
            raise ShapeError(
                f"fc expects {self.spec.in_features} features, got {flat.shape[1]}")
        return flat @ self.weight + self.bias, (flat, shape)

    def backward(self, cache, dy):
        flat, shape = cache
        dw = flat.T @ dy
        db = dy.sum(axis=0)
        dx = (dy @ self.weight.T).reshape(shape)
        return dx, {"weight": dw, "bias": db}


_LAYER_TYPES = {
    "conv": Conv2D,
    "maxpool": MaxPool,
    "prelu": PReLU,
    "fullyconnected": FullyConnected,
}


def make_layer(spec: LayerSpec, rng: Optional[Rng] = None):
    cls = _LAYER_TYPES[spec.kind]
    if cls in (Conv2D, FullyConnected):
        return cls(spec, rng)
    return cls(spec)


@dataclass
class ForwardTrace:
    caches: list = field(default_factory=list)


class EmbeddingModel:
    def __init__(self, layers, embedding_dim: int):
        self.layers = list(layers)
        self.embedding_dim = embedding_dim
        last = self.layers[-1]
        if not isinstance(last, FullyConnected) or \
                last.spec.out_features != embedding_dim:
            raise ConsistencyError("final layer must map to embedding_dim")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        trace = ForwardTrace()
        for layer in self.layers:
            x, cache = layer.forward(x)
            trace.caches.append(cache)
        return x, trace

    def backward(self, trace: ForwardTrace, grad_features,
                 need_input_grad=True):
        if len(trace.caches) != len(self.layers):
            raise ConsistencyError("trace does not match model")
        if grad_features.shape[-1] != self.embedding_dim:
            raise ShapeError("gradient width must equal embedding_dim")
        grads = [None] * len(self.layers)
        g = grad_features
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not need_input_grad and isinstance(layer, Conv2D):
                g, grads[i] = layer.backward(trace.caches[i], g,
                                             need_input_grad=False)
            else:
                g, grads[i] = layer.backward(trace.caches[i], g)
        return g, grads

    def parameters(self):
        """(layer_index, name, array) for every trainable tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((i, name, arr))
        return out

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())


def build_lenetpp(rng: Rng, embedding_dim: int = 2) -> EmbeddingModel:
    """Three double-conv stages (32, 64, 128 channels, 5x5 kernels, pad 2),
    PReLU after every conv, 2x2 max-pool after every stage, then one
    fully-connected layer down to the embedding. 28x28x1 input."""
    layers = []
    cin = 1
    for cout in (32, 64, 128):
        for _ in range(2):
            layers.append(make_layer(LayerSpec("conv", out_channels=cout,
                                               in_channels=cin, kernel=5,
                                               stride=1, padding=2), rng))
            layers.append(make_layer(LayerSpec("prelu", channels=cout)))
            cin = cout
        layers.append(make_layer(LayerSpec("maxpool", window=2)))
    layers.append(make_layer(LayerSpec("fullyconnected", in_features=3 * 3 * 128,
                                       out_features=embedding_dim), rng))
    return EmbeddingModel(layers, embedding_dim)


def build_mlp(rng: Rng, input_dim: int, hidden: tuple[int, ...],
              embedding_dim: int) -> EmbeddingModel:
    """PReLU MLP used for synthetic-data experiments and gradient checks."""
    layers = []
    fi = input_dim
    for width in hidden:
        layers.append(make_layer(LayerSpec("fullyconnected", in_features=fi,
                                           out_features=width), rng))
        layers.append(make_layer(LayerSpec("prelu", channels=width)))
        fi = width
    layers.append(make_layer(LayerSpec("fullyconnected", in_features=fi,
                                       out_features=embedding_dim), rng))
    return EmbeddingModel(layers, embedding_dim)
