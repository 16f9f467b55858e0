"""COCO-style detection metrics.

Boxes are (x1, y1, x2, y2) in image units. AP is the all-points
interpolated area under the precision/recall curve; mAP averages it over
classes and the IoU grid 0.50:0.05:0.95.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two box arrays of shape (M, 4) and (T, 4).

    Degenerate or inverted boxes have zero area and IoU 0 with everything.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    left = np.maximum(a[:, None, 0], b[None, :, 0])
    top = np.maximum(a[:, None, 1], b[None, :, 1])
    right = np.minimum(a[:, None, 2], b[None, :, 2])
    bottom = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(right - left, 0.0, None) * np.clip(bottom - top, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        result = np.where(union > 0.0, inter / union, 0.0)
    result[(area_a[:, None] <= 0.0) | (area_b[None, :] <= 0.0)] = 0.0
    return result


def iou(box_a, box_b):
    return float(iou_matrix(box_a, box_b)[0, 0])


def non_max_suppression(boxes, scores, iou_threshold):
    """Greedy score-descending NMS.

    Returns:
        numpy.ndarray: Indices of the kept boxes, highest score first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while order.size:
        best = order[0]
        keep.append(best)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[best], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def match_detections(detections, ground_truths, iou_threshold):
    """Greedy matching in descending score order.

    Each detection takes the unmatched ground truth of its image with the
    highest IoU (ties go to the lower ground-truth index), if that IoU
    reaches the threshold.

    Args:
        detections (list): (image_id, score, box) triples.
        ground_truths (list): (image_id, box) pairs.
        iou_threshold (float): Minimum IoU for a true positive.

    Returns:
        tuple: (true-positive flags in ranked order, ranked scores).
    """
    by_image = {}
    for index, (image_id, box) in enumerate(ground_truths):
        by_image.setdefault(image_id, []).append((index, box))
    matched = set()

    scores = np.asarray([d[1] for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(len(detections), dtype=bool)
    for rank, det_index in enumerate(order):
        image_id, _, box = detections[det_index]
        candidates = [(i, b) for i, b in by_image.get(image_id, []) if i not in matched]
        if not candidates:
            continue
        overlaps = iou_matrix(box, [b for _, b in candidates])[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            matched.add(candidates[best][0])
            flags[rank] = True
    return flags, scores[order]


def interpolated_area(true_positives, num_ground_truths):
    """All-points interpolated area under the precision/recall curve."""
    tp = np.cumsum(true_positives)
    fp = np.cumsum(~np.asarray(true_positives, dtype=bool))
    recall = tp / num_ground_truths
    precision = tp / np.maximum(tp + fp, 1)
    recall = np.concatenate(([0.0], recall, [1.0]))
    precision = np.concatenate(([0.0], precision, [0.0]))
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def average_precision(detections, ground_truths, iou_threshold=0.5):
    """All-points AP of one class.

    With no ground truths the AP is 1 when there are also no detections
    and 0 otherwise.
    """
    if not ground_truths:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0
    flags, _ = match_detections(detections, ground_truths, iou_threshold)
    return interpolated_area(flags, len(ground_truths))


@dataclass
class EvalResult:
    """Per-class AP on the IoU grid plus the AP50 and mAP aggregates."""

    ap_per_class_per_iou: np.ndarray
    ap50: float
    map: float
    classes_present: list = field(default_factory=list)


def evaluate(model, scenes, num_classes=3):
    """Evaluate a detector on labeled scenes.

    Args:
        model (callable): Maps a list of scenes to one list of detections
            (objects with box, class_id, score) per scene.
        scenes (list): Labeled scenes.
        num_classes (int): K.

    Returns:
        EvalResult: AP matrix of shape (K, len(IOU_GRID)); aggregates average
        over the classes that have ground truth in ``scenes``.
    """
    predictions = model(scenes) if scenes else []
    per_class_dets = {c: [] for c in range(num_classes)}
    per_class_gts = {c: [] for c in range(num_classes)}
    for image_id, (scene, detections) in enumerate(zip(scenes, predictions)):
        for obj in scene.objects:
            per_class_gts[obj.class_id].append((image_id, obj.box))
        for det in detections:
            per_class_dets[int(det.class_id)].append((image_id, float(det.score), det.box))

    matrix = np.zeros((num_classes, len(IOU_GRID)))
    for c in range(num_classes):
        for j, threshold in enumerate(IOU_GRID):
            matrix[c, j] = average_precision(per_class_dets[c], per_class_gts[c], threshold)

    present = [c for c in range(num_classes) if per_class_gts[c]]
    rows = matrix[present] if present else matrix
    result = EvalResult(
        ap_per_class_per_iou=matrix,
        ap50=float(rows[:, 0].mean()),
        map=float(rows.mean()),
        classes_present=present,
    )
    logging.info("Evaluated %d scenes: AP50=%.4f mAP=%.4f", len(scenes), result.ap50, result.map)
    return result
