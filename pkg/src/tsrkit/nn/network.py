"""Executable network: a parsed spec plus BN-folded parameters."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ModelError, ShapeMismatch
from ..geometry import Detection
from . import layers as L
from .region import region_decode
from .spec import (AvgPoolSpec, ConvSpec, MaxPoolSpec, NetworkSpec, RegionSpec, ReorgSpec,
                   RouteSpec, SoftmaxSpec, resolve_network_spec)
from .weights import WeightStore, random_weights, read_weights, zero_weights


@dataclass(frozen=True, eq=False)
class FoldedConv:
    weights: np.ndarray
    bias: np.ndarray


class Network:
    """Immutable after construction; ``run``/``forward`` allocate per call and are thread-safe.

    ``dtype`` selects the compute precision; float32 is the production path,
    float64 exists for comparisons against double-precision references.
    """

    def __init__(self, spec: NetworkSpec, store: WeightStore, dtype=np.float32):
        self.spec = spec
        self.header = store.header
        self.dtype = np.dtype(dtype)
        self._conv: dict[int, FoldedConv] = {}
        for i, layer in spec.conv_layers():
            if i not in store.layers:
                raise ModelError(f"layer {i}: no weights")
            w = store.layers[i]
            w.validate(layer, spec.input_shape_of(i)[0], i)
            if layer.batch_norm:
                kernel, bias = L.fold_batch_norm(w.weights, w.scale, w.mean, w.variance, w.biases,
                                                 dtype=self.dtype)
            else:
                kernel, bias = w.weights.astype(self.dtype), w.biases.astype(self.dtype)
            kernel.setflags(write=False)
            bias.setflags(write=False)
            self._conv[i] = FoldedConv(kernel, bias)

    @classmethod
    def from_files(cls, cfg: str | Path, weights: str | Path | None = None,
                   seed: int | None = None, dtype=np.float32) -> "Network":
        """Load a model; without a weight file, seeded random (or zero) weights are used."""
        spec = resolve_network_spec(cfg)
        if weights is not None:
            store = read_weights(weights, spec)
        elif seed is not None:
            store = random_weights(spec, seed)
        else:
            store = zero_weights(spec)
        return cls(spec, store, dtype)

    @property
    def name(self) -> str:
        return self.spec.name

    def run(self, x: np.ndarray, keep_all: bool = False):
        """Apply every layer except region decoding; returns the final feature map."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape != self.spec.input_shape:
            raise ShapeMismatch(f"input shape {x.shape}, network expects {self.spec.input_shape}")
        outputs: list[np.ndarray] = []
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, ConvSpec):
                p = self._conv[i]
                x = L.conv2d(x, p.weights, p.bias, layer.stride, layer.padding, layer.activation)
            elif isinstance(layer, MaxPoolSpec):
                x = L.maxpool(x, layer.size, layer.stride, layer.padding)
            elif isinstance(layer, AvgPoolSpec):
                x = L.global_avgpool(x)
            elif isinstance(layer, SoftmaxSpec):
                x = L.softmax(x, axis=0).astype(self.dtype)
            elif isinstance(layer, RouteSpec):
                x = np.concatenate([outputs[j] for j in layer.layers], axis=0)
            elif isinstance(layer, ReorgSpec):
                x = L.reorg(x, layer.stride)
            elif isinstance(layer, RegionSpec):
                pass
            else:  # pragma: no cover - spec parser only builds the types above
                raise ModelError(f"layer {i}: unsupported layer {layer!r}")
            if x.shape != self.spec.shapes[i]:
                raise ShapeMismatch(f"produced {x.shape}, expected {self.spec.shapes[i]}", i)
            outputs.append(x)
        return outputs if keep_all else x

    def forward(self, x: np.ndarray, conf_threshold: float = 0.25) -> list[Detection]:
        region = self.spec.region
        if region is None:
            raise ModelError("network has no region layer; use run() for raw outputs")
        feature = self.run(x)
        return region_decode(feature, region, self.spec.input_width, self.spec.input_height,
                             conf_threshold)


def forward(spec: NetworkSpec, weights: WeightStore, x: np.ndarray,
            conf_threshold: float = 0.25, dtype=np.float32) -> list[Detection]:
    return Network(spec, weights, dtype).forward(x, conf_threshold)


def layer_flops(spec: NetworkSpec) -> list[float]:
    """FLOPs per layer: ``2 * K^2 * Cin * Cout * Hout * Wout`` for convolutions, 0 otherwise."""
    flops = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            cin = spec.input_shape_of(i)[0]
            cout, oh, ow = spec.shapes[i]
            flops.append(2.0 * layer.size ** 2 * cin * cout * oh * ow)
        else:
            flops.append(0.0)
    return flops


def count_flops(spec: NetworkSpec) -> float:
    return float(sum(layer_flops(spec)))
