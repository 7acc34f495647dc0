"""Detection evaluation: IoU matching, PASCAL-style AP, mAP, CorLoc, COCO mAP.

Matching follows the standard protocol: detections in strictly decreasing
score order (ties broken by image id, then box coordinates) greedily claim
the highest-IoU unmatched ground-truth box, and a claim counts only when
IoU is strictly greater than the threshold. AP integrates the full
monotone precision envelope (all-point interpolation, the modern VOC
convention). Classes with no ground truth are excluded from means.
"""

from __future__ import annotations

from dataclasses import dataclass

from .datamodel import Box, GroundTruth

COCO_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Detection:
    """One scored box prediction for one image."""

    image_id: str
    box: Box
    class_index: int
    score: float


def _det_sort_key(d: Detection):
    # Descending score; ties by image then box coordinates, so matching
    # order (and therefore every metric) is deterministic.
    return (-d.score, d.image_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2)


def match_detections(
    dets: list[Detection], gts: list[GroundTruth], class_index: int, thr: float
) -> tuple[list[bool], int]:
    """Greedy TP/FP labelling for one class at one IoU threshold.

    Returns the TP flags in processing order plus the ground-truth count.
    """
    gt_boxes: dict[str, list[Box]] = {}
    for gt in gts:
        gt_boxes.setdefault(gt.image_id, [])
        for box, k in gt.objects:
            if k == class_index:
                gt_boxes[gt.image_id].append(box)
    n_gt = sum(len(v) for v in gt_boxes.values())

    matched: dict[str, list[bool]] = {i: [False] * len(v) for i, v in gt_boxes.items()}
    flags: list[bool] = []
    for det in sorted((d for d in dets if d.class_index == class_index), key=_det_sort_key):
        candidates = gt_boxes.get(det.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(candidates):
            if matched[det.image_id][j]:
                continue
            v = iou(det.box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou > thr:
            matched[det.image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def average_precision(
    dets: list[Detection], gts: list[GroundTruth], class_index: int, thr: float = 0.5
) -> float | None:
    """All-point interpolated AP for one class; None when the class has no GT."""
    flags, n_gt = match_detections(dets, gts, class_index, thr)
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    # Monotone envelope, then sum rectangles over recall steps.
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def mean_ap(
    dets: list[Detection], gts: list[GroundTruth], n_classes: int, thr: float = 0.5
) -> float:
    """Mean of the defined per-class APs."""
    aps = [average_precision(dets, gts, k, thr) for k in range(n_classes)]
    defined = [a for a in aps if a is not None]
    if not defined:
        return 0.0
    return sum(defined) / len(defined)


def coco_map(dets: list[Detection], gts: list[GroundTruth], n_classes: int) -> float:
    """Mean of mAP over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return sum(mean_ap(dets, gts, n_classes, t) for t in COCO_THRESHOLDS) / len(COCO_THRESHOLDS)


def corloc(dets: list[Detection], gts: list[GroundTruth], n_classes: int) -> float:
    """Fraction of (image, present class) pairs whose top detection localizes.

    For each image and each class with ground truth there, the single
    highest-scoring detection counts as correct when it overlaps some
    ground-truth box of that class with IoU > 0.5.
    """
    best: dict[tuple[str, int], Detection] = {}
    for d in sorted(dets, key=_det_sort_key):
        best.setdefault((d.image_id, d.class_index), d)

    hits = total = 0
    for gt in gts:
        present = sorted({k for _, k in gt.objects})
        for k in present:
            total += 1
            top = best.get((gt.image_id, k))
            if top is None:
                continue
            if any(iou(top.box, box) > 0.5 for box, kk in gt.objects if kk == k):
                hits += 1
    if total == 0:
        return 0.0
    return hits / total


def evaluation_report(
    dets: list[Detection],
    gts: list[GroundTruth],
    n_classes: int,
    split: str = "test",
    config_echo: dict | None = None,
) -> dict:
    """Assemble the metrics report emitted by the eval command.

    The test split reports mAP@0.5 and COCO-averaged mAP; the train split
    reports CorLoc. Unused fields stay null so the schema is stable.
    """
    report: dict = {
        "map50": None,
        "coco_map": None,
        "corloc": None,
        "per_class": {},
        "config_echo": dict(config_echo or {}),
    }
    report["config_echo"].setdefault("ap_interpolation", "all_point")
    report["config_echo"].setdefault("iou_criterion", "strictly_greater")
    report["config_echo"].setdefault("split", split)
    if split == "train":
        report["corloc"] = corloc(dets, gts, n_classes)
    else:
        report["map50"] = mean_ap(dets, gts, n_classes, 0.5)
        report["coco_map"] = coco_map(dets, gts, n_classes)
        for k in range(n_classes):
            ap50 = average_precision(dets, gts, k, 0.5)
            aps = [average_precision(dets, gts, k, t) for t in COCO_THRESHOLDS]
            defined = [a for a in aps if a is not None]
            report["per_class"][str(k)] = {
                "ap50": ap50,
                "ap_coco": sum(defined) / len(defined) if defined else None,
            }
    return report
