"""Decoding of region-layer feature maps into scored boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from ..geometry import BBox, Detection
from .layers import sigmoid, softmax
from .spec import RegionSpec


@dataclass(eq=False)
class RegionOutput:
    """Per-cell, per-anchor decoded values, each indexed ``[row, col, anchor]``.

    Boxes are ``(left, top, right, bottom)`` in network-input pixels, clipped.
    """

    boxes: np.ndarray
    objectness: np.ndarray
    class_probs: np.ndarray

    @property
    def class_ids(self) -> np.ndarray:
        return np.argmax(self.class_probs, axis=-1)

    @property
    def confidence(self) -> np.ndarray:
        return self.objectness * np.max(self.class_probs, axis=-1)


def decode_region_arrays(feature: np.ndarray, region: RegionSpec,
                         net_width: int, net_height: int) -> RegionOutput:
    c, gh, gw = feature.shape
    if c != region.channels:
        raise ShapeMismatch(f"region expects {region.channels} channels, got {c}")
    na, nc = region.num_anchors, region.num_classes
    # (anchor, 5 + classes, rows, cols) -> (rows, cols, anchor, 5 + classes)
    f = feature.astype(np.float64).reshape(na, 5 + nc, gh, gw).transpose(2, 3, 0, 1)
    stride_x = net_width / gw
    stride_y = net_height / gh
    cols = np.arange(gw, dtype=np.float64)[None, :, None]
    rows = np.arange(gh, dtype=np.float64)[:, None, None]
    anchors = np.asarray(region.anchors, dtype=np.float64)
    with np.errstate(over="ignore"):
        cx = (cols + sigmoid(f[..., 0])) * stride_x
        cy = (rows + sigmoid(f[..., 1])) * stride_y
        w = anchors[:, 0] * np.exp(f[..., 2]) * stride_x
        h = anchors[:, 1] * np.exp(f[..., 3]) * stride_y
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, float(net_width))
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, float(net_height))
    objectness = sigmoid(f[..., 4])
    class_probs = softmax(f[..., 5:], axis=-1)
    return RegionOutput(boxes, objectness, class_probs)


def region_decode(feature: np.ndarray, region: RegionSpec, net_width: int, net_height: int,
                  conf_threshold: float = 0.25) -> list[Detection]:
    """Detections with ``objectness * top class probability >= conf_threshold``.

    Emitted in grid order: row, then column, then anchor.
    """
    out = decode_region_arrays(feature, region, net_width, net_height)
    conf = out.confidence
    ids = out.class_ids
    dets = []
    for r, col, a in zip(*np.nonzero(conf >= conf_threshold)):
        l, t, rt, b = (float(v) for v in out.boxes[r, col, a])
        dets.append(Detection(BBox(l, t, rt, b), int(ids[r, col, a]),
                              min(max(float(conf[r, col, a]), 0.0), 1.0)))
    return dets
