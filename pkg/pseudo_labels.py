"""Teacher inference on weak views and pseudo-label filtering."""

import logging
from dataclasses import dataclass

import detector
from metrics import non_max_suppression
from scenes import flip_box

INFERENCE_CHUNK = 25


@dataclass(frozen=True)
class PseudoLabel:
    """A teacher detection kept as a training target, in the base frame."""

    class_id: int
    box: tuple
    confidence: float
    spread: tuple


def _unflip(detection, width):
    left, top, right, bottom = detection.spread
    return detector.Detection(
        box=flip_box(detection.box, width),
        class_id=detection.class_id,
        score=detection.score,
        spread=(right, top, left, bottom),
    )


def infer_teacher(teacher_params, weak_views, flips=None, stages=detector.NUM_STAGES, score_floor=0.0):
    """Teacher detections for a batch of weak views, mapped back to the base frame.

    Args:
        teacher_params (ParameterSet): Teacher weights (used frozen).
        weak_views (list): Scenes as seen by the teacher.
        flips (list, optional): Per-view flag, True when the view was flipped.
        stages (int): Cascade stage whose boxes and classes are reported.
        score_floor (float): Drop cells scoring below this.

    Returns:
        list: One list of Detection per view.
    """
    if not weak_views:
        return []
    outputs = detector.forward(teacher_params.detached(), [v.image for v in weak_views])
    return detections_in_base_frame(outputs, flips, stages, score_floor)


def detections_in_base_frame(outputs, flips=None, stages=detector.NUM_STAGES, score_floor=0.0):
    """Decode teacher outputs and undo the weak-view flips."""
    batch = detector.decode(outputs, stages, score_floor)
    flips = flips if flips is not None else [False] * len(batch)
    return [
        [_unflip(d, detector.IMAGE_SIZE) for d in detections] if flipped else detections
        for detections, flipped in zip(batch, flips)
    ]


def filter(detections, conf_threshold, nms_iou):
    """Class-agnostic NMS followed by a confidence cut.

    The cut is applied first; a box under the threshold only ever
    suppresses lower-scoring boxes, so the survivors are the same.

    Returns:
        list: PseudoLabels, highest confidence first.
    """
    if not 0.0 <= conf_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    kept = [d for d in detections if d.score >= conf_threshold]
    if not kept:
        return []
    keep = non_max_suppression([d.box for d in kept], [d.score for d in kept], nms_iou)
    return [
        PseudoLabel(
            class_id=kept[i].class_id,
            box=kept[i].box,
            confidence=kept[i].score,
            spread=kept[i].spread,
        )
        for i in keep
    ]


def pseudo_label_batch(teacher_params, pairs, conf_threshold, nms_iou, stages=detector.NUM_STAGES, outputs=None):
    """Pseudo-labels for every augmented pair of an unlabeled batch.

    Args:
        outputs (HeadOutputs, optional): Teacher outputs on the weak views,
            when the caller already ran the teacher.
    """
    flips = [p.flip_applied for p in pairs]
    if outputs is None:
        detections = infer_teacher(teacher_params, [p.weak for p in pairs], flips, stages, conf_threshold)
    else:
        detections = detections_in_base_frame(outputs, flips, stages, conf_threshold)
    labels = [filter(d, conf_threshold, nms_iou) for d in detections]
    logging.debug("Pseudo-labels per image: %s", [len(x) for x in labels])
    return labels


def make_predictor(params, stages=detector.NUM_STAGES, score_floor=0.01, nms_iou=0.5, top_k=100):
    """Evaluation model: scenes -> per-scene detections after NMS and top-k."""
    params = params.detached()

    def predict(scenes):
        results = []
        for start in range(0, len(scenes), INFERENCE_CHUNK):
            chunk = scenes[start:start + INFERENCE_CHUNK]
            outputs = detector.forward(params, [s.image for s in chunk])
            for detections in detector.decode(outputs, stages, score_floor):
                if detections:
                    keep = non_max_suppression(
                        [d.box for d in detections], [d.score for d in detections], nms_iou
                    )
                    detections = [detections[i] for i in keep[:top_k]]
                results.append(detections)
        return results

    return predict
