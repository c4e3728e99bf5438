"""Declarative layer stacks and the sequential network that runs them."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from .init import glorot_init

LAYER_KINDS = ("conv", "spatial_weight", "max_pool", "avg_pool", "global_avg_pool",
               "batchnorm", "relu", "sigmoid", "dense", "transposed_conv", "upsample")

SPATIAL_WEIGHT_A_INIT = -0.1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: Optional[int] = None   # conv / transposed_conv output channels
    size: int = 3                   # filter or pooling window
    stride: int = 1
    pad: int = 0
    units: Optional[int] = None     # dense
    factor: int = 3                 # upsample

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "transposed_conv"):
            if not self.filters or self.filters < 1:
                raise ValueError(f"{self.kind}: filters must be >= 1")
            if self.size < 1 or self.stride < 1 or self.pad < 0:
                raise ValueError(f"{self.kind}: invalid size/stride/pad")
        if self.kind in ("max_pool", "avg_pool") and (self.size < 1 or self.stride < 1):
            raise ValueError("pooling size and stride must be >= 1")
        if self.kind == "dense" and (not self.units or self.units < 1):
            raise ValueError("dense: units must be >= 1")
        if self.kind == "upsample" and self.factor < 1:
            raise ValueError("upsample: factor must be >= 1")

    # short constructors
    @classmethod
    def conv(cls, filters, size=3, stride=1, pad=0):
        return cls("conv", filters=filters, size=size, stride=stride, pad=pad)

    @classmethod
    def tconv(cls, filters, size=3, stride=1, pad=0):
        return cls("transposed_conv", filters=filters, size=size, stride=stride, pad=pad)

    @classmethod
    def dense(cls, units):
        return cls("dense", units=units)

    @classmethod
    def pool(cls, kind="max_pool", size=3):
        return cls(kind, size=size, stride=size)

    @classmethod
    def of(cls, kind):
        return cls(kind)


def infer_shape(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Per-sample output shape of ``layer`` for input ``shape``; raises ShapeError."""
    k = layer.kind
    if k in ("relu", "sigmoid"):
        return shape
    if k == "dense":
        return (layer.units,)
    if k == "batchnorm":
        if len(shape) not in (1, 3):
            raise ShapeError(f"batchnorm expects (C,) or (C,H,W), got {shape}")
        return shape
    if len(shape) != 3:
        raise ShapeError(f"{k} expects a (C,H,W) input, got {shape}")
    c, h, w = shape
    if k == "conv":
        if h + 2 * layer.pad < layer.size or w + 2 * layer.pad < layer.size:
            raise ShapeError(f"conv filter {layer.size} larger than input {h}x{w}")
        return (layer.filters, L.conv_output_size(h, layer.size, layer.stride, layer.pad),
                L.conv_output_size(w, layer.size, layer.stride, layer.pad))
    if k == "transposed_conv":
        ho = L.transposed_conv_output_size(h, layer.size, layer.stride, layer.pad)
        wo = L.transposed_conv_output_size(w, layer.size, layer.stride, layer.pad)
        if ho < 1 or wo < 1:
            raise ShapeError("transposed_conv output would be empty")
        return (layer.filters, ho, wo)
    if k == "spatial_weight":
        if h % 2 == 0 or w % 2 == 0:
            raise ShapeError(f"spatial_weight needs odd spatial dims, got {h}x{w}")
        return shape
    if k in ("max_pool", "avg_pool"):
        if layer.size != layer.stride:
            raise ShapeError("pooling supports kernel == stride only")
        if h % layer.size or w % layer.size:
            raise ShapeError(f"{k}: {h}x{w} not divisible by {layer.size}")
        return (c, h // layer.size, w // layer.size)
    if k == "global_avg_pool":
        return (c,)
    if k == "upsample":
        return (c, h * layer.factor, w * layer.factor)
    raise ShapeError(f"unhandled kind {k}")


@dataclass
class NetworkSpec:
    layers: List[LayerSpec]
    input_shape: Tuple[int, ...]

    def shapes(self) -> List[Tuple[int, ...]]:
        """Input shape followed by each layer's output shape."""
        out = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            try:
                out.append(infer_shape(layer, out[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return out

    def validate(self) -> Tuple[int, ...]:
        return self.shapes()[-1]

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.validate()


def _param_names(i: int, layer: LayerSpec) -> Tuple[str, ...]:
    if layer.kind in ("conv", "transposed_conv", "dense"):
        return (f"{i}.weight", f"{i}.bias")
    if layer.kind == "batchnorm":
        return (f"{i}.gamma", f"{i}.beta")
    if layer.kind == "spatial_weight":
        return (f"{i}.a", f"{i}.b")
    return ()


class Network:
    """Sequential network over a :class:`NetworkSpec`.

    ``params`` holds trainable arrays and ``buffers`` the batchnorm running
    statistics. Both are dicts keyed ``"<prefix><layer index>.<name>"``.
    """

    def __init__(self, spec: NetworkSpec, rng: Optional[np.random.Generator] = None,
                 prefix: str = "", params: Optional[Dict[str, np.ndarray]] = None,
                 buffers: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec
        self.prefix = prefix
        self.shapes = spec.shapes()
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        if params is None:
            if rng is None:
                raise ValueError("an rng is required to initialise parameters")
            self._init(rng)
        else:
            self.params = {k: params[prefix + k] if prefix + k in params else params[k]
                           for k in self._expected_names()}
            self.buffers = {k: buffers[prefix + k] if prefix + k in buffers else buffers[k]
                            for k in self._expected_buffers()} if buffers is not None else {}
            if not self.buffers:
                self._init_buffers()

    def _expected_names(self):
        return [n for i, layer in enumerate(self.spec.layers) for n in _param_names(i, layer)]

    def _expected_buffers(self):
        return [f"{i}.{n}" for i, layer in enumerate(self.spec.layers)
                if layer.kind == "batchnorm" for n in ("running_mean", "running_var")]

    def _init_buffers(self):
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "batchnorm":
                c = self.shapes[i][0]
                self.buffers[f"{i}.running_mean"] = np.zeros(c)
                self.buffers[f"{i}.running_var"] = np.ones(c)

    def _init(self, rng):
        for i, layer in enumerate(self.spec.layers):
            shape_in = self.shapes[i]
            if layer.kind == "conv":
                c, k, f = shape_in[0], layer.size, layer.filters
                self.params[f"{i}.weight"] = glorot_init((f, c, k, k), c * k * k, f * k * k, rng)
                self.params[f"{i}.bias"] = np.zeros(f)
            elif layer.kind == "transposed_conv":
                c, k, f = shape_in[0], layer.size, layer.filters
                self.params[f"{i}.weight"] = glorot_init((c, f, k, k), c * k * k, f * k * k, rng)
                self.params[f"{i}.bias"] = np.zeros(f)
            elif layer.kind == "dense":
                n = int(np.prod(shape_in))
                self.params[f"{i}.weight"] = glorot_init((layer.units, n), n, layer.units, rng)
                self.params[f"{i}.bias"] = np.zeros(layer.units)
            elif layer.kind == "batchnorm":
                c = shape_in[0]
                self.params[f"{i}.gamma"] = np.ones(c)
                self.params[f"{i}.beta"] = np.zeros(c)
            elif layer.kind == "spatial_weight":
                c = shape_in[0]
                self.params[f"{i}.a"] = np.full(c, SPATIAL_WEIGHT_A_INIT)
                self.params[f"{i}.b"] = np.zeros(c)
        self._init_buffers()

    @property
    def output_shape(self):
        return self.shapes[-1]

    def named_params(self) -> Dict[str, np.ndarray]:
        return {self.prefix + k: v for k, v in self.params.items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {self.prefix + k: v for k, v in self.buffers.items()}

    def set_params(self, params: Dict[str, np.ndarray]):
        for k in self.params:
            if self.prefix + k in params:
                self.params[k] = params[self.prefix + k]

    def forward(self, x, mode="train", update_stats=True, keep=False):
        """Run the stack. Returns ``(output, caches)``; with ``keep`` the caches
        list also carries every intermediate output under ``caches.outputs``."""
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} != network input {self.spec.input_shape}")
        caches = _Caches()
        p = self.params
        for i, layer in enumerate(self.spec.layers):
            k = layer.kind
            if k == "conv":
                x, c = L.conv2d_forward(x, p[f"{i}.weight"], p[f"{i}.bias"], layer.stride, layer.pad)
            elif k == "transposed_conv":
                x, c = L.transposed_conv_forward(x, p[f"{i}.weight"], p[f"{i}.bias"],
                                                 layer.stride, layer.pad)
            elif k == "dense":
                x, c = L.dense_forward(x, p[f"{i}.weight"], p[f"{i}.bias"])
            elif k == "batchnorm":
                x, c = L.batchnorm_forward(x, p[f"{i}.gamma"], p[f"{i}.beta"],
                                           self.buffers[f"{i}.running_mean"],
                                           self.buffers[f"{i}.running_var"], mode, update_stats)
            elif k == "spatial_weight":
                x, c = L.spatial_weight_forward(x, p[f"{i}.a"], p[f"{i}.b"])
            elif k == "max_pool":
                x, c = L.max_pool_forward(x, layer.size, layer.stride)
            elif k == "avg_pool":
                x, c = L.avg_pool_forward(x, layer.size, layer.stride)
            elif k == "global_avg_pool":
                x, c = L.global_avg_pool_forward(x)
            elif k == "relu":
                x, c = L.relu_forward(x)
            elif k == "sigmoid":
                x, c = L.sigmoid_forward(x)
            elif k == "upsample":
                x, c = L.upsample_forward(x, layer.factor)
            caches.append(c)
            if keep:
                caches.outputs.append(x)
        return x, caches

    def backward(self, dout, caches):
        """Returns ``(grad wrt input, grads dict keyed like named_params)``."""
        grads = {}
        for i in reversed(range(len(self.spec.layers))):
            layer = self.spec.layers[i]
            c = caches[i]
            k = layer.kind
            if k == "conv":
                dout, gw, gb = L.conv2d_backward(dout, c)
                grads[f"{i}.weight"], grads[f"{i}.bias"] = gw, gb
            elif k == "transposed_conv":
                dout, gw, gb = L.transposed_conv_backward(dout, c)
                grads[f"{i}.weight"], grads[f"{i}.bias"] = gw, gb
            elif k == "dense":
                dout, gw, gb = L.dense_backward(dout, c)
                grads[f"{i}.weight"], grads[f"{i}.bias"] = gw, gb
            elif k == "batchnorm":
                dout, gg, gb = L.batchnorm_backward(dout, c)
                grads[f"{i}.gamma"], grads[f"{i}.beta"] = gg, gb
            elif k == "spatial_weight":
                dout, ga, gb = L.spatial_weight_backward(dout, c)
                grads[f"{i}.a"], grads[f"{i}.b"] = ga, gb
            elif k == "max_pool":
                dout = L.max_pool_backward(dout, c)
            elif k == "avg_pool":
                dout = L.avg_pool_backward(dout, c)
            elif k == "global_avg_pool":
                dout = L.global_avg_pool_backward(dout, c)
            elif k == "relu":
                dout = L.relu_backward(dout, c)
            elif k == "sigmoid":
                dout = L.sigmoid_backward(dout, c)
            elif k == "upsample":
                dout = L.upsample_backward(dout, c)
        return dout, {self.prefix + k: v for k, v in grads.items()}

    def kink_signature(self, caches) -> bytes:
        """Digest of every ReLU mask and max-pool argmax: equal digests mean the
        forward passes sit on the same differentiable piece."""
        h = hashlib.sha1()
        for layer, c in zip(self.spec.layers, caches):
            if layer.kind == "relu":
                h.update(np.packbits(c).tobytes())
            elif layer.kind == "max_pool":
                h.update(c[1].tobytes())
        return h.digest()


class _Caches(list):
    def __init__(self):
        super().__init__()
        self.outputs = []


def with_layer(spec: NetworkSpec, index: int, **changes) -> NetworkSpec:
    layers = list(spec.layers)
    layers[index] = replace(layers[index], **changes)
    return NetworkSpec(layers, spec.input_shape)
