"""Deterministic stages around the network: color, resize, augmentation, LR schedule, detection."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .dataset_io import NUM_RAW_CLASSES, Image, SuperClass, remap_to_superclass
from .errors import TsrkitError
from .geometry import DEFAULT_NMS_IOU, BBox, Detection, nms
from .nn.network import Network

# ---------------------------------------------------------------------------
# Color


def rgb_to_hsv(image: Image | np.ndarray) -> np.ndarray:
    """Hexcone HSV as float64 (H, W, 3): hue in degrees [0, 360), saturation and value in [0, 1]."""
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    rgb = px.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h * 60.0, 0.0)
    h = np.where(h >= 360.0, h - 360.0, h)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`, rounded to uint8."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    zero = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    choices = [
        (c, x, zero), (x, c, zero), (zero, c, x),
        (zero, x, c), (x, zero, c), (c, zero, x),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, (r1, g1, b1) in enumerate(choices):
        sel = sector == k
        out[..., 0] = np.where(sel, r1, out[..., 0])
        out[..., 1] = np.where(sel, g1, out[..., 1])
        out[..., 2] = np.where(sel, b1, out[..., 2])
    out += (v - c)[..., None]
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Resize


@dataclass(frozen=True)
class BoxTransform:
    """Maps original-image coordinates: ``x' = sx * x + dx``, ``y' = sy * y + dy``."""

    sx: float
    sy: float
    dx: float
    dy: float

    def apply(self, box: BBox) -> BBox:
        return BBox(box.left * self.sx + self.dx, box.top * self.sy + self.dy,
                    box.right * self.sx + self.dx, box.bottom * self.sy + self.dy)

    def invert(self, box: BBox) -> BBox:
        return BBox((box.left - self.dx) / self.sx, (box.top - self.dy) / self.sy,
                    (box.right - self.dx) / self.sx, (box.bottom - self.dy) / self.sy)

    def inverse(self) -> "BoxTransform":
        return BoxTransform(1 / self.sx, 1 / self.sy, -self.dx / self.sx, -self.dy / self.sy)


IDENTITY = BoxTransform(1.0, 1.0, 0.0, 0.0)
PAD_VALUE = 128


def resize_bilinear(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of (H, W, C) uint8 with half-pixel sample centers."""
    h, w = pixels.shape[:2]
    if (w, h) == (width, height):
        return pixels.copy()
    src = pixels.astype(np.float64)

    def axis(n_out: int, n_in: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def letterbox_resize(image: Image, target_w: int, target_h: int) -> tuple[Image, BoxTransform]:
    """Aspect-preserving resize centered on a gray canvas."""
    s = min(target_w / image.width, target_h / image.height)
    new_w = max(1, min(target_w, round(s * image.width)))
    new_h = max(1, min(target_h, round(s * image.height)))
    dx = (target_w - new_w) // 2
    dy = (target_h - new_h) // 2
    canvas = np.full((target_h, target_w, 3), PAD_VALUE, dtype=np.uint8)
    canvas[dy:dy + new_h, dx:dx + new_w] = resize_bilinear(image.pixels, new_w, new_h)
    return Image(target_w, target_h, canvas), BoxTransform(s, s, float(dx), float(dy))


def stretch_resize(image: Image, target_w: int, target_h: int) -> tuple[Image, BoxTransform]:
    pixels = resize_bilinear(image.pixels, target_w, target_h)
    return (Image(target_w, target_h, pixels),
            BoxTransform(target_w / image.width, target_h / image.height, 0.0, 0.0))


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    grayscale: bool = False
    grayscale_p: float = 0.5
    crop25: bool = False
    crop25_p: float = 0.5
    vertical_flip: bool = False
    vertical_flip_p: float = 0.5
    horizontal_flip: bool = False
    horizontal_flip_p: float = 0.5
    seed: int = 0
    max_crop_fraction: float = 0.25
    min_box_retention: float = 0.2

    def __post_init__(self) -> None:
        for name in ("grayscale_p", "crop25_p", "vertical_flip_p", "horizontal_flip_p",
                     "max_crop_fraction", "min_box_retention"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


class Augmented(NamedTuple):
    image: Image
    boxes: list[BBox]
    kept: list[int]  # indices into the input boxes that survived


def to_grayscale(image: Image) -> Image:
    px = image.pixels.astype(np.int64)
    y = (299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2] + 500) // 1000
    return Image(image.width, image.height, np.repeat(y[..., None], 3, axis=-1).astype(np.uint8))


def flip_horizontal(image: Image, boxes: Sequence[BBox]) -> tuple[Image, list[BBox]]:
    w = image.width
    flipped = [BBox(w - b.right, b.top, w - b.left, b.bottom) for b in boxes]
    return Image(w, image.height, image.pixels[:, ::-1].copy()), flipped


def flip_vertical(image: Image, boxes: Sequence[BBox]) -> tuple[Image, list[BBox]]:
    h = image.height
    flipped = [BBox(b.left, h - b.bottom, b.right, h - b.top) for b in boxes]
    return Image(image.width, h, image.pixels[::-1].copy()), flipped


def crop(image: Image, boxes: Sequence[BBox], x0: int, y0: int, width: int, height: int,
         min_retention: float = 0.2) -> tuple[Image, list[BBox], list[int]]:
    """Cut the ``width x height`` window at (x0, y0); boxes are clipped, shifted and filtered."""
    if not (0 <= x0 and 0 <= y0 and width >= 1 and height >= 1
            and x0 + width <= image.width and y0 + height <= image.height):
        raise ValueError(f"crop window {(x0, y0, width, height)} outside {image.width}x{image.height}")
    pixels = image.pixels[y0:y0 + height, x0:x0 + width].copy()
    out, kept = [], []
    for i, b in enumerate(boxes):
        clipped = b.shift(-x0, -y0).clip(width, height)
        if b.area > 0 and clipped.area >= min_retention * b.area and clipped.area > 0:
            out.append(clipped)
            kept.append(i)
    return Image(width, height, pixels), out, kept


def augment(image: Image, boxes: Sequence[BBox], config: AugmentationConfig,
            rng: np.random.Generator | None = None) -> Augmented:
    """Apply enabled ops in a fixed order: grayscale, crop, vertical flip, horizontal flip."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    boxes = list(boxes)
    kept = list(range(len(boxes)))
    if config.grayscale and rng.random() < config.grayscale_p:
        image = to_grayscale(image)
    if config.crop25 and rng.random() < config.crop25_p:
        fx, fy = rng.uniform(0.0, config.max_crop_fraction, size=2)
        cut_w = min(int(round(fx * image.width)), image.width - 1)
        cut_h = min(int(round(fy * image.height)), image.height - 1)
        x0 = int(rng.integers(0, cut_w + 1))
        y0 = int(rng.integers(0, cut_h + 1))
        image, boxes, idx = crop(image, boxes, x0, y0, image.width - cut_w, image.height - cut_h,
                                 config.min_box_retention)
        kept = [kept[i] for i in idx]
    if config.vertical_flip and rng.random() < config.vertical_flip_p:
        image, boxes = flip_vertical(image, boxes)
    if config.horizontal_flip and rng.random() < config.horizontal_flip_p:
        image, boxes = flip_horizontal(image, boxes)
    return Augmented(image, boxes, kept)


# ---------------------------------------------------------------------------
# Learning-rate schedule


@dataclass(frozen=True)
class TrainingSchedule:
    initial_lr: float = 0.002
    decay_factor: float = 0.1
    decay_period: int = 2000

    def __post_init__(self) -> None:
        if self.initial_lr <= 0 or not 0 < self.decay_factor < 1 or self.decay_period < 1:
            raise ValueError(f"invalid schedule {self}")


def learning_rate(schedule: TrainingSchedule, step: int) -> float:
    """Step decay ``initial * factor ** (step // period)``, evaluated in decimal to avoid drift."""
    if step < 0:
        raise ValueError("step must be non-negative")
    k = step // schedule.decay_period
    lr = Decimal(repr(schedule.initial_lr)) * Decimal(repr(schedule.decay_factor)) ** k
    value = float(lr)
    return value if value > 0 else float(np.nextafter(0.0, 1.0))


# ---------------------------------------------------------------------------
# Detection


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    HSV = "HSV"


class ResizeMode(str, enum.Enum):
    LETTERBOX = "FixedAspectLetterbox"
    STRETCH = "Stretch"


@dataclass(frozen=True)
class PreprocessConfig:
    """``target_*`` of ``None`` means the network input size."""

    target_width: int | None = None
    target_height: int | None = None
    color_space: ColorSpace = ColorSpace.RGB
    resize_mode: ResizeMode = ResizeMode.LETTERBOX

    def __post_init__(self) -> None:
        object.__setattr__(self, "color_space", ColorSpace(self.color_space))
        object.__setattr__(self, "resize_mode", ResizeMode(self.resize_mode))
        for v in (self.target_width, self.target_height):
            if v is not None and v < 1:
                raise ValueError("target size must be >= 1")


@dataclass(frozen=True)
class Thresholds:
    conf: float = 0.25
    nms: float = DEFAULT_NMS_IOU
    class_aware: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["preprocess"]["color_space"] = self.preprocess.color_space.value
        d["preprocess"]["resize_mode"] = self.preprocess.resize_mode.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        parts = {}
        for f in dataclasses.fields(cls):
            section = data.get(f.name, {})
            sub = f.default_factory
            names = {sf.name for sf in dataclasses.fields(sub)}
            unknown = set(section) - names
            if unknown:
                raise TsrkitError(f"unknown {f.name} keys: {', '.join(sorted(unknown))}")
            try:
                parts[f.name] = sub(**section)
            except (TypeError, ValueError) as exc:
                raise TsrkitError(f"invalid {f.name} section: {exc}") from None
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise TsrkitError(f"unknown config sections: {', '.join(sorted(unknown))}")
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise TsrkitError(f"{path}: {exc}") from None
        return cls.from_dict(data)


LabelMap = Callable[[int], "int | None"]


def superclass_label_map(num_classes: int) -> LabelMap:
    """Label translation into SuperClass for four-class and raw 43-class models.

    Other label spaces pass through unchanged.
    """
    if num_classes == len(SuperClass):
        return SuperClass
    if num_classes == NUM_RAW_CLASSES:
        return remap_to_superclass
    return lambda c: c


def prepare_input(image: Image, width: int, height: int,
                  config: PreprocessConfig) -> tuple[np.ndarray, BoxTransform]:
    """Resize, convert color and normalize into a (3, H, W) float32 array in [0, 1]."""
    resize = letterbox_resize if config.resize_mode is ResizeMode.LETTERBOX else stretch_resize
    if (image.width, image.height) == (width, height):
        resized, transform = image, IDENTITY
    else:
        resized, transform = resize(image, width, height)
    if config.color_space is ColorSpace.HSV:
        hsv = rgb_to_hsv(resized)
        hsv[..., 0] /= 360.0
        arr = hsv.astype(np.float32)
    else:
        arr = resized.pixels.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)), transform


def run_detection(image: Image, model: Network, config: PreprocessConfig | None = None,
                  thresholds: Thresholds | None = None,
                  label_map: LabelMap | None = None) -> list[Detection]:
    """Image to detections in original-image pixel coordinates, sorted by confidence."""
    config = config or PreprocessConfig()
    thresholds = thresholds or Thresholds()
    spec = model.spec
    width = config.target_width or spec.input_width
    height = config.target_height or spec.input_height
    if (width, height) != (spec.input_width, spec.input_height):
        raise TsrkitError(f"preprocess target {width}x{height} differs from the network input "
                          f"{spec.input_width}x{spec.input_height}")
    if spec.region is None:
        raise TsrkitError("model has no region layer")
    if label_map is None:
        label_map = superclass_label_map(spec.region.num_classes)
    x, transform = prepare_input(image, width, height, config)
    dets = model.forward(x, thresholds.conf)
    dets = nms(dets, thresholds.nms, thresholds.class_aware)
    out = []
    for d in dets:
        label = label_map(d.class_id)
        if label is None:
            continue
        box = transform.invert(d.box).clip(image.width, image.height)
        if box.width <= 0 or box.height <= 0:
            continue
        out.append(Detection(box, label, d.confidence))
    return out
