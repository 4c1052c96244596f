"""Model checkpoint container ("SQFM").

Layout: magic, version, embedding_dim, layer count, one record per layer
(kind tag, geometry, parameter tensors), then named records for the
center table, the chief head, and optimizer/trainer state. All integers
little-endian, all floats 64-bit little-endian. Serialization is
deterministic, so load followed by save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError
from .losses import (
    AngularMarginConfig,
    CenterTable,
    MarginHead,
    SoftmaxHead,
)
from .network import EmbeddingModel, LayerSpec, make_layer

_MAGIC = b"SQFM"
_VERSION = 1

_KIND_TAGS = {"conv": 1, "maxpool": 2, "prelu": 3, "fullyconnected": 4}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _pack_array(arr: np.ndarray) -> bytes:
    dims = arr.shape
    return (struct.pack("<B", len(dims))
            + struct.pack(f"<{len(dims)}I", *dims)
            + arr.astype("<f8").tobytes())


def _unpack_array(raw: bytes, off: int):
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    size = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims)
    off += 8 * size
    return arr.copy(), off  # frombuffer views are read-only


def _layer_geometry(spec: LayerSpec) -> tuple[int, ...]:
    if spec.kind == "conv":
        return (spec.out_channels, spec.in_channels, spec.kernel,
                spec.stride, spec.padding)
    if spec.kind == "maxpool":
        return (spec.window,)
    if spec.kind == "prelu":
        return (spec.channels,)
    return (spec.in_features, spec.out_features)


def _spec_from_geometry(kind: str, geo: tuple[int, ...]) -> LayerSpec:
    if kind == "conv":
        return LayerSpec(kind, out_channels=geo[0], in_channels=geo[1],
                         kernel=geo[2], stride=geo[3], padding=geo[4])
    if kind == "maxpool":
        return LayerSpec(kind, window=geo[0])
    if kind == "prelu":
        return LayerSpec(kind, channels=geo[0])
    return LayerSpec(kind, in_features=geo[0], out_features=geo[1])


@dataclass
class TrainState:
    iteration: int = 0
    rng_state: int = 0
    velocities: list = field(default_factory=list)


@dataclass
class Checkpoint:
    model: EmbeddingModel
    head: Optional[object] = None          # SoftmaxHead | MarginHead
    centers: Optional[CenterTable] = None
    state: Optional[TrainState] = None


def _param_order(layer):
    return sorted(layer.params().items())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    chunks = [_MAGIC, struct.pack("<III", _VERSION, model.embedding_dim,
                                  len(model.layers))]
    for layer in model.layers:
        geo = _layer_geometry(layer.spec)
        chunks.append(struct.pack("<BB", _KIND_TAGS[layer.spec.kind], len(geo)))
        chunks.append(struct.pack(f"<{len(geo)}I", *geo))
        params = _param_order(layer)
        chunks.append(struct.pack("<B", len(params)))
        for name, arr in params:
            nb = name.encode()
            chunks.append(struct.pack("<B", len(nb)) + nb)
            chunks.append(_pack_array(arr))

    def record(name: str, payload: bytes):
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb
                      + struct.pack("<Q", len(payload)) + payload)

    if ckpt.centers is not None:
        t = ckpt.centers
        payload = (struct.pack("<Bd", 1 if t.mode == "angular" else 0,
                               t.center_lr) + _pack_array(t.centers))
        record("centers", payload)
    if ckpt.head is not None:
        if isinstance(ckpt.head, SoftmaxHead):
            payload = _pack_array(ckpt.head.weight) + _pack_array(ckpt.head.bias)
            record("softmax_head", payload)
        else:
            cfg = ckpt.head.cfg
            payload = (struct.pack("<dI", cfg.delta, cfg.m)
                       + _pack_array(ckpt.head.weight))
            record("margin_head", payload)
    if ckpt.state is not None:
        st = ckpt.state
        payload = struct.pack("<QQI", st.iteration, st.rng_state,
                              len(st.velocities))
        payload += b"".join(_pack_array(v) for v in st.velocities)
        record("trainstate", payload)

    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, embedding_dim, n_layers = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 16
    layers = []
    for _ in range(n_layers):
        tag, ngeo = struct.unpack_from("<BB", raw, off)
        off += 2
        geo = struct.unpack_from(f"<{ngeo}I", raw, off)
        off += 4 * ngeo
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise FormatError(f"{path}: unknown layer tag {tag}")
        layer = make_layer(_spec_from_geometry(kind, geo))
        (nparams,) = struct.unpack_from("<B", raw, off)
        off += 1
        for _ in range(nparams):
            (nlen,) = struct.unpack_from("<B", raw, off)
            off += 1
            name = raw[off:off + nlen].decode()
            off += nlen
            arr, off = _unpack_array(raw, off)
            getattr(layer, name)[...] = arr
        layers.append(layer)
    model = EmbeddingModel(layers, embedding_dim)

    ckpt = Checkpoint(model)
    while off < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (plen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        payload = raw[off:off + plen]
        off += plen
        if name == "centers":
            mode_tag, lr = struct.unpack_from("<Bd", payload, 0)
            centers, _ = _unpack_array(payload, 9)
            ckpt.centers = CenterTable(
                centers, "angular" if mode_tag else "euclidean", lr)
        elif name == "softmax_head":
            w, p = _unpack_array(payload, 0)
            b, _ = _unpack_array(payload, p)
            head = SoftmaxHead(w.shape[0], w.shape[1])
            head.weight[...] = w
            head.bias[...] = b
            ckpt.head = head
        elif name == "margin_head":
            delta, m = struct.unpack_from("<dI", payload, 0)
            w, _ = _unpack_array(payload, 12)
            head = MarginHead(w.shape[0], w.shape[1],
                              AngularMarginConfig(delta=delta, m=m))
            head.weight[...] = w
            ckpt.head = head
        elif name == "trainstate":
            it, rng_state, nvel = struct.unpack_from("<QQI", payload, 0)
            p = 20
            vels = []
            for _ in range(nvel):
                v, p = _unpack_array(payload, p)
                vels.append(v)
            ckpt.state = TrainState(it, rng_state, vels)
        else:
            raise FormatError(f"{path}: unknown record {name!r}")
    return ckpt
