"""VOC-style detection evaluation: greedy matching, all-points AP, per-class recall."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import AnnotationRecord, SuperClass, mapped_records
from .errors import EvaluationError
from .geometry import BBox, Detection, iou, ranking_key

DEFAULT_MATCH_IOU = 0.5
DEFAULT_ACCURACY_CONF = 0.5


class NoGroundTruth(EvaluationError):
    pass


class ImageSetMismatch(EvaluationError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    class_id: int


@dataclass
class MatchOutcome:
    """Per detection (input order): TP flag and IoU with the claimed ground truth."""

    tp: list[bool]
    det_iou: list[float]
    gt_matched: list[bool]
    # Index of the claimed ground truth per detection, or -1.
    claimed: list[int] = field(default_factory=list)

    @property
    def false_negatives(self) -> int:
        return sum(not m for m in self.gt_matched)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_thresh: float = DEFAULT_MATCH_IOU) -> MatchOutcome:
    """Greedy matching within one image.

    Detections are visited by confidence (ties: smaller left, then top); each
    claims the still-unmatched same-class ground truth of highest IoU, if that
    IoU is at least ``iou_thresh``.
    """
    tp = [False] * len(dets)
    det_iou = [0.0] * len(dets)
    claimed = [-1] * len(dets)
    matched = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: ranking_key(dets[i]))
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            matched[best_j] = True
            tp[i] = True
            det_iou[i] = best
            claimed[i] = best_j
    return MatchOutcome(tp, det_iou, matched, claimed)


def precision_recall(tp_ranked: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(tp_ranked, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_ranked, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    return precision, recall


def average_precision(tp_ranked: Sequence[bool], n_gt: int) -> float:
    """Area under the monotone precision envelope, integrated at every recall step.

    ``tp_ranked`` holds TP/FP flags for one class, already sorted by
    descending confidence across the whole dataset.
    """
    if n_gt <= 0:
        raise NoGroundTruth("class has no ground truth")
    if len(tp_ranked) == 0:
        return 0.0
    precision, recall = precision_recall(tp_ranked, n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return min(max(ap, 0.0), 1.0)


@dataclass
class ClassResult:
    class_id: int
    name: str
    ap: float
    recall_at_conf: float
    gt_count: int
    num_detections: int
    true_positives: int
    pr_curve: list[tuple[float, float]] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    classes: list[ClassResult]
    map: float
    conf_for_accuracy: float
    iou_threshold: float = DEFAULT_MATCH_IOU

    def to_json(self) -> dict:
        return {
            "classes": [
                {"name": c.name, "ap": c.ap, "recall_at_conf": c.recall_at_conf,
                 "gt_count": c.gt_count}
                for c in self.classes
            ],
            "map": self.map,
            "conf_for_accuracy": self.conf_for_accuracy,
        }

    def to_csv(self) -> str:
        rows = ["name,ap,recall_at_conf,gt_count"]
        for c in self.classes:
            rows.append(f"{c.name},{c.ap:.6f},{c.recall_at_conf:.6f},{c.gt_count}")
        total = sum(c.gt_count for c in self.classes)
        mean_recall = float(np.mean([c.recall_at_conf for c in self.classes])) if self.classes else 0.0
        rows.append(f"mAP,{self.map:.6f},{mean_recall:.6f},{total}")
        return "\n".join(rows) + "\n"

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def class_name(class_id: int) -> str:
    try:
        return SuperClass(class_id).label
    except ValueError:
        return str(class_id)


def evaluate(detections: Mapping[str, Sequence[Detection]],
             ground_truth: Mapping[str, Sequence[GroundTruth]],
             conf_for_accuracy: float = DEFAULT_ACCURACY_CONF,
             iou_thresh: float = DEFAULT_MATCH_IOU,
             images: Iterable[str] | None = None) -> EvalReport:
    """Evaluate a detection dump against ground truth, both keyed by image name.

    ``images`` widens the known image set beyond those carrying ground truth
    (images without signs). Detections on unknown images raise ImageSetMismatch.
    """
    known = set(ground_truth) | set(images or ())
    stray = sorted(set(detections) - known)
    if stray:
        raise ImageSetMismatch(f"detections reference images without ground truth: "
                               f"{', '.join(stray[:5])}{' ...' if len(stray) > 5 else ''}")
    gt_count: dict[int, int] = defaultdict(int)
    for gts in ground_truth.values():
        for g in gts:
            gt_count[int(g.class_id)] += 1

    # (ranking key, TP flag, confidence) per class over the whole dataset
    ranked: dict[int, list[tuple[tuple, bool, float]]] = defaultdict(list)
    for name in sorted(detections):
        dets = detections[name]
        outcome = match_detections(dets, ground_truth.get(name, ()), iou_thresh)
        for d, hit in zip(dets, outcome.tp):
            ranked[int(d.class_id)].append(((*ranking_key(d), name), hit, d.confidence))

    results = []
    for cid in sorted(gt_count):
        entries = sorted(ranked.get(cid, []), key=lambda e: e[0])
        flags = [hit for _, hit, _ in entries]
        n = gt_count[cid]
        ap = average_precision(flags, n)
        tp_at_conf = sum(1 for _, hit, conf in entries if hit and conf >= conf_for_accuracy)
        if flags:
            precision, recall = precision_recall(flags, n)
            curve = [(float(r), float(p)) for r, p in zip(recall, precision)]
        else:
            curve = []
        results.append(ClassResult(cid, class_name(cid), ap, tp_at_conf / n, n, len(flags),
                                   sum(flags), curve))
    m = float(np.mean([r.ap for r in results])) if results else 0.0
    return EvalReport(results, m, conf_for_accuracy, iou_thresh)


def ground_truth_from_records(records: Iterable[AnnotationRecord]) -> dict[str, list[GroundTruth]]:
    """Group annotations by image under their superclass.

    Unmapped classes are dropped, but their images stay in the image set.
    """
    records = list(records)
    out: dict[str, list[GroundTruth]] = {r.image_name: [] for r in records}
    for r, sc in mapped_records(records):
        out[r.image_name].append(GroundTruth(r.box, sc))
    return out
