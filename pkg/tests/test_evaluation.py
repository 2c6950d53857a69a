import random

import numpy as np
import pytest

from oracles import brute_force_map
from tsrkit.dataset_io import AnnotationRecord, SuperClass
from tsrkit.evaluation import (
    GroundTruth, ImageSetMismatch, NoGroundTruth, average_precision, evaluate,
    ground_truth_from_records, match_detections,
)
from tsrkit.geometry import BBox, Detection


def D(l, t, r, b, cls=0, conf=0.9):
    return Detection(BBox(l, t, r, b), cls, conf)


def G(l, t, r, b, cls=0):
    return GroundTruth(BBox(l, t, r, b), cls)


def test_match_single_tp():
    gt = G(0, 0, 10, 10)
    det = D(0, 0, 10, 16)  # IoU 0.625
    out = match_detections([det], [gt])
    assert out.tp == [True] and out.gt_matched == [True]
    assert out.det_iou[0] == pytest.approx(0.625)


def test_match_duplicate_is_fp():
    gt = G(0, 0, 10, 10)
    out = match_detections([D(0, 0, 10, 11, conf=0.8), D(0, 0, 10, 10, conf=0.9)], [gt])
    assert out.tp == [False, True]
    assert out.false_negatives == 0


def test_match_class_mismatch():
    out = match_detections([D(0, 0, 10, 10, cls=SuperClass.DANGER)],
                           [G(0, 0, 10, 10, cls=SuperClass.STOP)])
    assert out.tp == [False] and out.false_negatives == 1


def test_match_claims_best_unmatched():
    gts = [G(0, 0, 10, 10), G(2, 0, 12, 10)]
    out = match_detections([D(0, 0, 10, 10, conf=0.9), D(1, 0, 11, 10, conf=0.8)], gts)
    assert out.tp == [True, True] and out.claimed == [0, 1]


def test_match_below_threshold():
    out = match_detections([D(0, 0, 10, 10)], [G(5, 0, 15, 10)])
    assert out.tp == [False]


def test_ap_examples():
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-9)
    assert average_precision([True] * 5, 5) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([False, True], 1) == 0.5
    with pytest.raises(NoGroundTruth):
        average_precision([True], 0)


@pytest.mark.parametrize("seed", range(30))
def test_ap_append_properties(seed):
    r = random.Random(seed)
    flags = [r.random() < 0.5 for _ in range(r.randint(0, 15))]
    n = sum(flags) + r.randint(1, 4)
    base = average_precision(flags, n)
    assert 0.0 <= base <= 1.0
    assert average_precision(flags + [True], n) >= base
    assert average_precision(flags + [False], n) == base


def test_evaluate_oracle_detector():
    gt = {"a.ppm": [G(0, 0, 10, 10, 0), G(20, 20, 40, 40, 3)], "b.ppm": [G(5, 5, 9, 9, 1)]}
    dets = {k: [Detection(g.box, g.class_id, 1.0) for g in v] for k, v in gt.items()}
    rep = evaluate(dets, gt)
    assert rep.map == 1.0
    assert all(c.ap == 1.0 and c.recall_at_conf == 1.0 for c in rep.classes)
    assert [c.name for c in rep.classes] == ["Prohibitory", "Mandatory", "Stop"]


def test_evaluate_empty_dump():
    gt = {"a.ppm": [G(0, 0, 10, 10, 0)]}
    rep = evaluate({}, gt)
    assert rep.map == 0.0 and rep.classes[0].recall_at_conf == 0.0


def test_evaluate_image_mismatch():
    with pytest.raises(ImageSetMismatch):
        evaluate({"zz.ppm": [D(0, 0, 1, 1)]}, {"a.ppm": [G(0, 0, 1, 1)]})
    rep = evaluate({"zz.ppm": [D(0, 0, 1, 1)]}, {"a.ppm": [G(0, 0, 1, 1)]}, images=["zz.ppm"])
    assert rep.map == 0.0


def test_recall_at_conf_threshold():
    gt = {"a.ppm": [G(0, 0, 10, 10), G(20, 0, 30, 10)]}
    dets = {"a.ppm": [D(0, 0, 10, 10, conf=0.9), D(20, 0, 30, 10, conf=0.4)]}
    rep = evaluate(dets, gt, conf_for_accuracy=0.5)
    assert rep.classes[0].recall_at_conf == 0.5
    assert rep.classes[0].ap == 1.0


def random_dataset(r, n_images=20, classes=4):
    gts, dets = [], []
    for i in range(n_images):
        name = f"{i:05d}.ppm"
        for _ in range(r.randint(0, 4)):
            l, t = r.randint(0, 80), r.randint(0, 80)
            box = (l, t, l + r.randint(5, 30), t + r.randint(5, 30))
            cls = r.randrange(classes)
            gts.append((name, box, cls))
            for _ in range(r.choice([0, 1, 1, 2])):
                j = [r.randint(-4, 4) for _ in range(4)]
                jb = (box[0] + j[0], box[1] + j[1], max(box[0] + j[0] + 1, box[2] + j[2]),
                      max(box[1] + j[1] + 1, box[3] + j[3]))
                c = cls if r.random() < 0.85 else r.randrange(classes)
                dets.append((name, jb, c, round(r.random(), 2)))
        for _ in range(r.randint(0, 2)):
            l, t = r.randint(0, 80), r.randint(0, 80)
            dets.append((name, (l, t, l + r.randint(5, 30), t + r.randint(5, 30)),
                         r.randrange(classes), round(r.random(), 2)))
    return gts, dets


def to_maps(gts, dets):
    gt_map, det_map = {}, {}
    for name, box, cls in gts:
        gt_map.setdefault(name, []).append(GroundTruth(BBox(*box), cls))
    for name, box, cls, conf in dets:
        det_map.setdefault(name, []).append(Detection(BBox(*box), cls, conf))
    return gt_map, det_map


@pytest.mark.parametrize("seed", range(50))
def test_evaluate_vs_brute_force(seed):
    r = random.Random(seed)
    gts, dets = random_dataset(r)
    if not gts:
        gts = [("00000.ppm", (0, 0, 5, 5), 0)]
    gt_map, det_map = to_maps(gts, dets)
    rep = evaluate(det_map, gt_map, images=[d[0] for d in dets])
    aps, mean = brute_force_map(dets, gts)
    assert {c.class_id: c.ap for c in rep.classes} == pytest.approx(aps, abs=1e-9)
    assert abs(rep.map - mean) <= 1e-9
    assert rep.map == float(np.mean([c.ap for c in rep.classes]))


@pytest.mark.parametrize("seed", range(10))
def test_evaluate_partition_invariance(seed):
    r = random.Random(500 + seed)
    gts, dets = random_dataset(r, n_images=12)
    gts.append(("00000.ppm", (0, 0, 5, 5), 0))
    gt_map, det_map = to_maps(gts, dets)
    names = sorted(set(gt_map) | set(det_map))
    r.shuffle(names)
    cut = len(names) // 2
    parts = [names[:cut], names[cut:]]
    merged_d, merged_g = {}, {}
    for part in parts:
        merged_d.update({n: det_map[n] for n in part if n in det_map})
        merged_g.update({n: gt_map[n] for n in part if n in gt_map})
    a = evaluate(det_map, gt_map, images=names)
    b = evaluate(merged_d, merged_g, images=names)
    assert a.to_json() == b.to_json()


def test_report_serialization():
    gt = {"a.ppm": [G(0, 0, 10, 10, 3)]}
    rep = evaluate({"a.ppm": [D(0, 0, 10, 10, 3, 0.7)]}, gt)
    js = rep.to_json()
    assert js == {"classes": [{"name": "Stop", "ap": 1.0, "recall_at_conf": 1.0, "gt_count": 1}],
                  "map": 1.0, "conf_for_accuracy": 0.5}
    assert rep.to_csv().splitlines()[0] == "name,ap,recall_at_conf,gt_count"
    assert rep.to_csv().splitlines()[-1].startswith("mAP,1.000000")


def test_ground_truth_from_records_keeps_unmapped_images():
    recs = [AnnotationRecord("a.ppm", BBox(0, 0, 5, 5), 14),
            AnnotationRecord("b.ppm", BBox(0, 0, 5, 5), 13)]
    gt = ground_truth_from_records(recs)
    assert gt == {"a.ppm": [GroundTruth(BBox(0, 0, 5, 5), SuperClass.STOP)], "b.ppm": []}
