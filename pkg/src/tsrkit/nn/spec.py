"""Darknet-style network description: section parser and shape inference.

Supported sections: ``[net]``, ``[convolutional]``, ``[maxpool]``, ``[avgpool]``,
``[softmax]``, ``[route]``, ``[reorg]`` and ``[region]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Union

from ..errors import ModelError, ShapeMismatch

ACTIVATIONS = ("linear", "leaky")


class UnknownSection(ModelError):
    pass


class MissingField(ModelError):
    pass


Shape = tuple[int, int, int]  # (channels, height, width)


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    size: int
    stride: int = 1
    padding: int = 0
    batch_norm: bool = False
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.filters < 1 or self.size < 1 or self.stride < 1 or self.padding < 0:
            raise ModelError(f"invalid convolution parameters {self}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unsupported activation {self.activation!r}")

    @property
    def same_pad(self) -> bool:
        return self.padding == self.size // 2

    def output_shape(self, shape: Shape) -> Shape:
        _, h, w = shape
        oh = (h + 2 * self.padding - self.size) // self.stride + 1
        ow = (w + 2 * self.padding - self.size) // self.stride + 1
        return (self.filters, oh, ow)


@dataclass(frozen=True)
class MaxPoolSpec:
    """Max pooling; ``padding`` is the total extra extent, split with floor at the start.

    The default padding of ``size - 1`` gives ``ceil(W / stride)`` outputs with
    windows clamped at the trailing edge.
    """

    size: int
    stride: int
    padding: int | None = None

    def __post_init__(self) -> None:
        if self.size < 1 or self.stride < 1:
            raise ModelError(f"invalid maxpool parameters {self}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.size - 1)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        return (c, (h + self.padding - self.size) // self.stride + 1,
                (w + self.padding - self.size) // self.stride + 1)


@dataclass(frozen=True)
class AvgPoolSpec:
    """Global average pooling."""

    def output_shape(self, shape: Shape) -> Shape:
        return (shape[0], 1, 1)


@dataclass(frozen=True)
class SoftmaxSpec:
    """Softmax across channels at every spatial position."""

    def output_shape(self, shape: Shape) -> Shape:
        return shape


@dataclass(frozen=True)
class RouteSpec:
    """Channel concatenation of earlier layer outputs (absolute indices)."""

    layers: tuple[int, ...]


@dataclass(frozen=True)
class ReorgSpec:
    stride: int

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        s = self.stride
        return (c * s * s, h // s, w // s)


@dataclass(frozen=True)
class RegionSpec:
    anchors: tuple[tuple[float, float], ...]
    num_classes: int

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    def output_shape(self, shape: Shape) -> Shape:
        return shape


LayerSpec = Union[ConvSpec, MaxPoolSpec, AvgPoolSpec, SoftmaxSpec, RouteSpec, ReorgSpec, RegionSpec]


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int
    input_height: int
    layers: tuple[LayerSpec, ...]
    channels: int = 3
    shapes: tuple[Shape, ...] = field(default=(), compare=False)
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "shapes", infer_shapes(self))

    @property
    def input_shape(self) -> Shape:
        return (self.channels, self.input_height, self.input_width)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1] if self.shapes else self.input_shape

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    @property
    def region(self) -> RegionSpec | None:
        if self.layers and isinstance(self.layers[-1], RegionSpec):
            return self.layers[-1]
        return None

    def conv_layers(self) -> list[tuple[int, ConvSpec]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, ConvSpec)]


def infer_shapes(spec: NetworkSpec) -> tuple[Shape, ...]:
    if spec.input_width < 1 or spec.input_height < 1 or spec.channels < 1:
        raise ModelError(f"invalid input size {spec.channels}x{spec.input_height}x{spec.input_width}")
    shapes: list[Shape] = []
    current: Shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, RegionSpec) and i != len(spec.layers) - 1:
            raise ShapeMismatch("region layer must be the last layer", i)
        if isinstance(layer, RouteSpec):
            if not layer.layers:
                raise ShapeMismatch("route without layers", i)
            parts = []
            for src in layer.layers:
                if not 0 <= src < i:
                    raise ShapeMismatch(f"route source {src} does not precede the route", i)
                parts.append(shapes[src])
            if len({(h, w) for _, h, w in parts}) != 1:
                raise ShapeMismatch(f"route sources have different spatial sizes {parts}", i)
            current = (sum(c for c, _, _ in parts), parts[0][1], parts[0][2])
        else:
            if isinstance(layer, ConvSpec) and current[1] + 2 * layer.padding < layer.size:
                raise ShapeMismatch(f"kernel {layer.size} larger than padded input {current}", i)
            if isinstance(layer, ReorgSpec):
                s = layer.stride
                if current[1] % s or current[2] % s or current[0] % (s * s):
                    raise ShapeMismatch(f"reorg stride {s} does not divide {current}", i)
            if isinstance(layer, RegionSpec) and current[0] != layer.channels:
                raise ShapeMismatch(
                    f"region expects {layer.channels} channels "
                    f"({layer.num_anchors} anchors x (5 + {layer.num_classes})), got {current[0]}", i)
            current = layer.output_shape(current)
        if min(current) < 1:
            raise ShapeMismatch(f"empty output shape {current}", i)
        shapes.append(current)
    return tuple(shapes)


# ---------------------------------------------------------------------------
# Text format

_KNOWN_SECTIONS = {"net", "network", "convolutional", "conv", "maxpool", "avgpool",
                   "softmax", "route", "reorg", "region"}


def _sections(text: str) -> list[tuple[str, dict[str, str], int]]:
    sections: list[tuple[str, dict[str, str], int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ModelError(f"line {lineno}: malformed section header {raw!r}")
            name = line[1:-1].strip().lower()
            if name not in _KNOWN_SECTIONS:
                raise UnknownSection(f"line {lineno}: unknown section [{name}]")
            sections.append((name, {}, lineno))
            continue
        if "=" not in line:
            raise ModelError(f"line {lineno}: expected key=value, got {raw!r}")
        if not sections:
            raise ModelError(f"line {lineno}: option outside any section")
        key, value = line.split("=", 1)
        sections[-1][1][key.strip().lower()] = value.strip()
    return sections


def _int(opts: dict[str, str], key: str, default: int | None, where: str) -> int:
    if key not in opts:
        if default is None:
            raise MissingField(f"{where}: missing '{key}'")
        return default
    try:
        return int(opts[key])
    except ValueError:
        raise ModelError(f"{where}: '{key}' must be an integer, got {opts[key]!r}") from None


def _parse_layer(name: str, opts: dict[str, str], index: int, lineno: int) -> LayerSpec:
    where = f"layer {index} [{name}] (line {lineno})"
    if name in ("convolutional", "conv"):
        size = _int(opts, "size", 1, where)
        pad = _int(opts, "pad", 0, where)
        padding = _int(opts, "padding", size // 2 if pad else 0, where)
        return ConvSpec(
            filters=_int(opts, "filters", None, where),
            size=size,
            stride=_int(opts, "stride", 1, where),
            padding=padding,
            batch_norm=bool(_int(opts, "batch_normalize", 0, where)),
            activation=opts.get("activation", "linear").lower(),
        )
    if name == "maxpool":
        stride = _int(opts, "stride", 1, where)
        size = _int(opts, "size", stride, where)
        padding = _int(opts, "padding", size - 1, where)
        return MaxPoolSpec(size, stride, padding)
    if name == "avgpool":
        return AvgPoolSpec()
    if name == "softmax":
        return SoftmaxSpec()
    if name == "reorg":
        return ReorgSpec(_int(opts, "stride", 1, where))
    if name == "route":
        if "layers" not in opts:
            raise MissingField(f"{where}: missing 'layers'")
        try:
            refs = [int(v) for v in opts["layers"].split(",") if v.strip()]
        except ValueError:
            raise ModelError(f"{where}: bad layers list {opts['layers']!r}") from None
        return RouteSpec(tuple(index + r if r < 0 else r for r in refs))
    if name == "region":
        if "anchors" not in opts:
            raise MissingField(f"{where}: missing 'anchors'")
        if "classes" not in opts:
            raise MissingField(f"{where}: missing 'classes'")
        try:
            values = [float(v) for v in opts["anchors"].split(",") if v.strip()]
        except ValueError:
            raise ModelError(f"{where}: bad anchors list") from None
        if not values or len(values) % 2:
            raise ModelError(f"{where}: anchors must be a non-empty list of (w, h) pairs")
        anchors = tuple(zip(values[0::2], values[1::2]))
        num = _int(opts, "num", len(anchors), where)
        if num != len(anchors):
            raise ModelError(f"{where}: num={num} but {len(anchors)} anchors given")
        return RegionSpec(anchors, _int(opts, "classes", None, where))
    raise UnknownSection(f"{where}: unknown section")


def parse_network_spec(text: str, name: str = "") -> NetworkSpec:
    sections = _sections(text)
    if not sections or sections[0][0] not in ("net", "network"):
        raise MissingField("network description must start with a [net] section")
    _, net, lineno = sections[0]
    where = f"[net] (line {lineno})"
    width = _int(net, "width", None, where)
    height = _int(net, "height", None, where)
    channels = _int(net, "channels", 3, where)
    layers = []
    for index, (sec, opts, ln) in enumerate(sections[1:]):
        if sec in ("net", "network"):
            raise ModelError(f"line {ln}: duplicate [net] section")
        layers.append(_parse_layer(sec, opts, index, ln))
    return NetworkSpec(width, height, tuple(layers), channels, name=name)


def load_network_spec(path: str | Path) -> NetworkSpec:
    path = Path(path)
    return parse_network_spec(path.read_text(), name=path.stem)


BUNDLED_CONFIGS = ("darknet19-224", "yolov2-608", "yolov2-tiny-416")


def bundled_config_text(name: str) -> str:
    if name not in BUNDLED_CONFIGS:
        raise ModelError(f"unknown bundled config {name!r}; choose from {', '.join(BUNDLED_CONFIGS)}")
    return resources.files("tsrkit.configs").joinpath(f"{name}.cfg").read_text()


def bundled_config(name: str) -> NetworkSpec:
    return parse_network_spec(bundled_config_text(name), name=name)


def resolve_network_spec(ref: str | Path) -> NetworkSpec:
    """Load a spec from a file path, or from a bundled config name."""
    if str(ref) in BUNDLED_CONFIGS:
        return bundled_config(str(ref))
    return load_network_spec(ref)
