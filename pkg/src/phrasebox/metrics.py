"""COCO-style average precision and grounding recall@k."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix

Box = tuple[float, float, float, float]

IOU_GRID = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    per_class_ap: dict[str, float]
    per_class_ap50: dict[str, float] = field(default_factory=dict)
    recall_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "per_class_ap": self.per_class_ap,
            "per_class_ap50": self.per_class_ap50,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
        }


def _class_ap(
    dets: list[tuple[str, Box, float, int]],
    gts_by_image: dict[str, np.ndarray],
    total_gt: int,
    iou_threshold: float,
) -> float:
    """AP for one class at one IoU threshold.

    `dets` are (image_id, box, score, order) tuples; matching is greedy in
    descending score (ties broken by image id then insertion order), each
    detection taking the unmatched ground truth with the highest IoU >= the
    threshold. Precision is 101-point interpolated.
    """
    if total_gt == 0:
        raise ValueError("class has no ground truth")
    if not dets:
        return 0.0
    dets = sorted(dets, key=lambda d: (-d[2], d[0], d[3]))
    matched: dict[str, np.ndarray] = {
        img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts_by_image.items()
    }
    tp = np.zeros(len(dets))
    for i, (img, box, _, _) in enumerate(dets):
        gts = gts_by_image.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix(np.array([box]), gts)[0]
        ious[matched[img]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            matched[img][j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope, then 101-point interpolation
    ap = 0.0
    for r in RECALL_GRID:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(RECALL_GRID)


def compute_ap(
    detections: dict[str, list[tuple[Box, str, float]]],
    ground_truth: dict[str, list[tuple[Box, str]]],
    iou_thresholds: tuple[float, ...] | None = None,
) -> EvalResult:
    """COCO protocol: greedy per-class matching by descending score, 101-point
    interpolated precision, averaged over classes then IoU thresholds.

    `detections` maps image id to (box, class, score) lists; `ground_truth`
    maps image id to (box, class) lists. Classes without ground truth are
    excluded.
    """
    thresholds = tuple(iou_thresholds) if iou_thresholds else IOU_GRID
    classes = sorted({cls for anns in ground_truth.values() for _, cls in anns})
    dets_by_class: dict[str, list[tuple[str, Box, float, int]]] = {c: [] for c in classes}
    for img, dets in detections.items():
        for order, (box, cls, score) in enumerate(dets):
            if cls in dets_by_class:
                dets_by_class[cls].append((img, box, score, order))
    per_class_ap: dict[str, float] = {}
    per_class_ap50: dict[str, float] = {}
    for cls in classes:
        gts_by_image = {
            img: np.array([b for b, c in anns if c == cls], dtype=np.float64).reshape(-1, 4)
            for img, anns in ground_truth.items()
        }
        gts_by_image = {img: g for img, g in gts_by_image.items() if len(g)}
        total = sum(len(g) for g in gts_by_image.values())
        aps = [_class_ap(dets_by_class[cls], gts_by_image, total, t) for t in thresholds]
        per_class_ap[cls] = float(np.mean(aps))
        per_class_ap50[cls] = (
            aps[thresholds.index(0.5)] if 0.5 in thresholds else float("nan")
        )
    if not classes:
        return EvalResult(ap=0.0, ap50=0.0, per_class_ap={}, per_class_ap50={})
    ap = float(np.mean(list(per_class_ap.values())))
    ap50 = float(np.mean(list(per_class_ap50.values())))
    return EvalResult(ap=ap, ap50=ap50, per_class_ap=per_class_ap, per_class_ap50=per_class_ap50)


def compute_recall_at_k(
    predictions: dict[tuple[str, int], list[tuple[Box, float]]],
    gold: dict[tuple[str, int], list[Box]],
    ks: tuple[int, ...] = (1, 5, 10),
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """Any-box grounding recall: a phrase counts as recalled at k if any of its
    top-k predicted boxes overlaps any of its gold boxes at IoU >= threshold.

    Keys are (image_id, phrase_index); phrases with no gold boxes are skipped.
    """
    recalled = {k: 0 for k in ks}
    total = 0
    for key, gold_boxes in gold.items():
        if not gold_boxes:
            continue
        total += 1
        preds = sorted(predictions.get(key, []), key=lambda p: -p[1])
        if not preds:
            continue
        ious = iou_matrix(
            np.array([p[0] for p in preds], dtype=np.float64),
            np.array(gold_boxes, dtype=np.float64),
        ).max(axis=1)
        for k in ks:
            if len(ious[:k]) and ious[:k].max() >= iou_threshold:
                recalled[k] += 1
    if total == 0:
        return {k: 0.0 for k in ks}
    return {k: recalled[k] / total for k in ks}
