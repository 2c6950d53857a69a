"""Binary weight files in the reference detector layout.

Header: int32 major, minor, revision, then the ``seen`` image counter as int64
when ``major * 10 + minor >= 2`` (int32 otherwise). Then, for every
convolutional layer in network order: BN shift, scale, mean, variance (each
``filters`` floats) when the layer is batch-normalized, plain biases
otherwise; followed by the ``filters x channels x size x size`` kernel.
Everything is little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelError
from .spec import ConvSpec, NetworkSpec

_F32 = np.dtype("<f4")


class BadHeader(ModelError):
    pass


class SizeMismatch(ModelError):
    def __init__(self, message: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{message}: expected {expected} bytes, got {actual}")


@dataclass(frozen=True)
class WeightHeader:
    major: int = 0
    minor: int = 2
    revision: int = 0
    seen: int = 0

    @property
    def wide_seen(self) -> bool:
        return self.major * 10 + self.minor >= 2

    @property
    def nbytes(self) -> int:
        return 20 if self.wide_seen else 16

    def pack(self) -> bytes:
        fmt = "<iiiq" if self.wide_seen else "<iiii"
        return struct.pack(fmt, self.major, self.minor, self.revision, self.seen)


@dataclass(eq=False)
class ConvWeights:
    """Parameters of one convolutional layer.

    ``biases`` is the BN shift for batch-normalized layers. ``scale``,
    ``mean`` and ``variance`` are ``None`` for layers without BN.
    """

    weights: np.ndarray
    biases: np.ndarray
    scale: np.ndarray | None = None
    mean: np.ndarray | None = None
    variance: np.ndarray | None = None

    @property
    def batch_norm(self) -> bool:
        return self.scale is not None

    def validate(self, layer: ConvSpec, in_channels: int, index: int) -> None:
        f = layer.filters
        expected = (f, in_channels, layer.size, layer.size)
        if self.weights.shape != expected:
            raise ModelError(f"layer {index}: kernel shape {self.weights.shape}, expected {expected}")
        blocks = [self.biases] + ([self.scale, self.mean, self.variance] if layer.batch_norm else [])
        if layer.batch_norm != self.batch_norm:
            raise ModelError(f"layer {index}: batch-norm parameters do not match the layer spec")
        for b in blocks:
            if b.shape != (f,):
                raise ModelError(f"layer {index}: parameter block shape {b.shape}, expected {(f,)}")
        if self.variance is not None and np.any(self.variance < 0):
            raise ModelError(f"layer {index}: negative batch-norm variance")

    def nbytes(self) -> int:
        n = self.weights.size + self.biases.size
        if self.batch_norm:
            n += 3 * self.biases.size
        return 4 * n


@dataclass(eq=False)
class WeightStore:
    header: WeightHeader = field(default_factory=WeightHeader)
    layers: dict[int, ConvWeights] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> ConvWeights:
        return self.layers[index]


def expected_size(spec: NetworkSpec, header: WeightHeader | None = None) -> int:
    header = header or WeightHeader()
    total = header.nbytes
    for i, layer in spec.conv_layers():
        cin = spec.input_shape_of(i)[0]
        n = layer.filters * (4 if layer.batch_norm else 1) + layer.filters * cin * layer.size ** 2
        total += 4 * n
    return total


def layer_extents(spec: NetworkSpec, header: WeightHeader | None = None) -> list[dict]:
    """Byte offsets of each convolutional layer's blocks within a weight file."""
    header = header or WeightHeader()
    offset = header.nbytes
    rows = []
    for i, layer in spec.conv_layers():
        cin = spec.input_shape_of(i)[0]
        params = layer.filters * (4 if layer.batch_norm else 1)
        kernel = layer.filters * cin * layer.size ** 2
        rows.append({
            "layer": i, "filters": layer.filters, "in_channels": cin, "size": layer.size,
            "batch_norm": layer.batch_norm, "offset": offset,
            "param_bytes": 4 * params, "kernel_bytes": 4 * kernel,
            "end": offset + 4 * (params + kernel),
        })
        offset += 4 * (params + kernel)
    return rows


def read_header(data: bytes) -> WeightHeader:
    if len(data) < 16:
        raise BadHeader(f"weight file too short for a header ({len(data)} bytes)")
    major, minor, revision = struct.unpack_from("<iii", data, 0)
    if min(major, minor, revision) < 0 or major >= 1000 or minor >= 1000:
        raise BadHeader(f"implausible weight file version {major}.{minor}.{revision}")
    if major * 10 + minor >= 2:
        if len(data) < 20:
            raise BadHeader(f"weight file too short for a version {major}.{minor} header")
        (seen,) = struct.unpack_from("<q", data, 12)
    else:
        (seen,) = struct.unpack_from("<i", data, 12)
    return WeightHeader(major, minor, revision, seen)


def load_weights(data: bytes, spec: NetworkSpec) -> WeightStore:
    header = read_header(data)
    expected = expected_size(spec, header)
    if len(data) != expected:
        raise SizeMismatch("weight file does not match network", expected, len(data))
    flat = np.frombuffer(data, dtype=_F32, offset=header.nbytes)
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        block = flat[pos:pos + n].astype(np.float32)
        pos += n
        return block

    store = WeightStore(header)
    for i, layer in spec.conv_layers():
        f = layer.filters
        cin = spec.input_shape_of(i)[0]
        biases = take(f)
        scale = mean = variance = None
        if layer.batch_norm:
            scale, mean, variance = take(f), take(f), take(f)
            if np.any(variance < 0):
                raise ModelError(f"layer {i}: negative batch-norm variance in weight file")
        kernel = take(f * cin * layer.size ** 2).reshape(f, cin, layer.size, layer.size)
        store.layers[i] = ConvWeights(kernel, biases, scale, mean, variance)
    return store


def read_weights(path: str | Path, spec: NetworkSpec) -> WeightStore:
    return load_weights(Path(path).read_bytes(), spec)


def dump_weights(store: WeightStore, spec: NetworkSpec) -> bytes:
    chunks = [store.header.pack()]
    for i, layer in spec.conv_layers():
        w = store.layers[i]
        w.validate(layer, spec.input_shape_of(i)[0], i)
        blocks = [w.biases]
        if layer.batch_norm:
            blocks += [w.scale, w.mean, w.variance]
        blocks.append(w.weights.ravel())
        chunks.extend(np.asarray(b, dtype=_F32).tobytes() for b in blocks)
    return b"".join(chunks)


def write_weights(path: str | Path, store: WeightStore, spec: NetworkSpec) -> None:
    Path(path).write_bytes(dump_weights(store, spec))


def zero_weights(spec: NetworkSpec) -> WeightStore:
    """All-zero kernels and biases; BN layers get unit scale and variance."""
    store = WeightStore()
    for i, layer in spec.conv_layers():
        f = layer.filters
        cin = spec.input_shape_of(i)[0]
        kernel = np.zeros((f, cin, layer.size, layer.size), np.float32)
        if layer.batch_norm:
            store.layers[i] = ConvWeights(kernel, np.zeros(f, np.float32), np.ones(f, np.float32),
                                          np.zeros(f, np.float32), np.ones(f, np.float32))
        else:
            store.layers[i] = ConvWeights(kernel, np.zeros(f, np.float32))
    return store


def random_weights(spec: NetworkSpec, seed: int = 0, gain: float = 1.0) -> WeightStore:
    """Seeded fan-in scaled weights that keep activations bounded through deep stacks."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for i, layer in spec.conv_layers():
        f = layer.filters
        cin = spec.input_shape_of(i)[0]
        fan_in = cin * layer.size ** 2
        kernel = (rng.standard_normal((f, cin, layer.size, layer.size)) * gain / np.sqrt(fan_in))
        biases = rng.uniform(-0.1, 0.1, f)
        if layer.batch_norm:
            store.layers[i] = ConvWeights(
                kernel.astype(np.float32), biases.astype(np.float32),
                rng.uniform(0.5, 1.5, f).astype(np.float32),
                rng.uniform(-0.1, 0.1, f).astype(np.float32),
                rng.uniform(0.5, 1.5, f).astype(np.float32))
        else:
            store.layers[i] = ConvWeights(kernel.astype(np.float32), biases.astype(np.float32))
    return store
