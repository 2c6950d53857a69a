"""Axis-aligned box geometry: IoU, anchor labeling and greedy NMS."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

# Anchor labeling thresholds used for region-proposal training targets.
OBJECT_IOU = 0.7
NOT_OBJECT_IOU = 0.3
DEFAULT_NMS_IOU = 0.7


@dataclass(frozen=True)
class BBox:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self) -> None:
        if not (self.left <= self.right and self.top <= self.bottom):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def clip(self, width: float, height: float) -> "BBox":
        left = min(max(self.left, 0.0), width)
        right = min(max(self.right, 0.0), width)
        top = min(max(self.top, 0.0), height)
        bottom = min(max(self.bottom, 0.0), height)
        return BBox(left, top, right, bottom)

    def shift(self, dx: float, dy: float) -> "BBox":
        return BBox(self.left + dx, self.top + dy, self.right + dx, self.bottom + dy)


@dataclass(frozen=True)
class Detection:
    """A scored box.

    ``class_id`` is the label index in the producing model's label space. For
    four-class models it coincides with the ``SuperClass`` integer code.
    """

    box: BBox
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def with_box(self, box: BBox) -> "Detection":
        return replace(self, box=box)


class AnchorLabel(enum.Enum):
    OBJECT = "object"
    NOT_OBJECT = "not_object"
    IGNORE = "ignore"


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.right, b.right) - max(a.left, b.left)
    h = min(a.bottom, b.bottom) - max(a.top, b.top)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def label_anchor(iou_value: float,
                 object_threshold: float = OBJECT_IOU,
                 background_threshold: float = NOT_OBJECT_IOU) -> AnchorLabel:
    # Both thresholds are strict; the band in between (inclusive) is ignored.
    if iou_value > object_threshold:
        return AnchorLabel.OBJECT
    if iou_value < background_threshold:
        return AnchorLabel.NOT_OBJECT
    return AnchorLabel.IGNORE


def ranking_key(det: Detection) -> tuple[float, float, float]:
    """Sort key: confidence descending, then smaller left, then smaller top."""
    return (-det.confidence, det.box.left, det.box.top)


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=ranking_key)


def nms(dets: Sequence[Detection],
        iou_threshold: float = DEFAULT_NMS_IOU,
        class_aware: bool = True) -> list[Detection]:
    """Greedy non-maximum suppression.

    A detection is dropped when its IoU with an already kept detection is
    strictly greater than ``iou_threshold``. With ``class_aware`` only
    detections of the same class suppress each other. Output is ordered by
    :func:`ranking_key`.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    kept: list[Detection] = []
    for det in sort_detections(dets):
        suppressed = False
        for k in kept:
            if class_aware and k.class_id != det.class_id:
                continue
            if iou(k.box, det.box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(det)
    return kept
