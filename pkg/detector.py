"""Dense-grid toy detector with cascade box heads.

A two-stage conv backbone (64x64 grayscale -> 16x16 grid, stride 4) feeds
1x1 conv heads: an objectness logit with proposal offsets, and for each of
three cascade stages a class head, a box-delta head and a spread head.
Stage k refines the stage k-1 boxes; stage 0 is the 16x16 anchor centred
on each cell. Deltas are expressed in anchor units and the box chain is
taped, so a stage-k target moves with the deltas of the stages before it.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

import tensor as T
from errors import ShapeError
from metrics import iou_matrix

IMAGE_SIZE = 64
NUM_CLASSES = 3
STRIDE = 4
GRID = IMAGE_SIZE // STRIDE
ANCHOR_SIZE = 16.0
CHANNELS = (8, 16)
NUM_STAGES = 3
SPREAD_FLOOR = 0.05
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the detection loss."""

    tau: tuple = (0.5, 0.6, 0.7)
    cascade_enabled: bool = True
    uncertainty_enabled: bool = True
    box_regression: bool = True
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    npll_rho: float = 0.25

    @property
    def stages(self):
        return NUM_STAGES if self.cascade_enabled else 1


class ParameterSet(T.NamedTensors):
    """Named weights of one detector (teacher or student)."""

    def check_aligned(self, other):
        if self.shapes() != other.shapes() or self.names() != other.names():
            raise ShapeError("parameter sets are not aligned (layer names or shapes differ)")


def layer_shapes(num_classes=NUM_CLASSES):
    """Ordered (name, shape) list of every detector tensor."""
    c1, c2 = CHANNELS
    shapes = [
        ("backbone.conv1.weight", (c1, 1, 3, 3)),
        ("backbone.conv1.bias", (c1,)),
        ("backbone.conv2.weight", (c2, c1, 3, 3)),
        ("backbone.conv2.bias", (c2,)),
        ("head.objectness.weight", (1, c2, 1, 1)),
        ("head.objectness.bias", (1,)),
        ("head.proposal.weight", (4, c2, 1, 1)),
        ("head.proposal.bias", (4,)),
    ]
    for k in range(1, NUM_STAGES + 1):
        for head, width in (("class", num_classes), ("box", 4), ("spread", 4)):
            shapes.append((f"head.stage{k}.{head}.weight", (width, c2, 1, 1)))
            shapes.append((f"head.stage{k}.{head}.bias", (width,)))
    return shapes


def init_params(rng, num_classes=NUM_CLASSES):
    """He-normal backbone, small-normal heads, rare-positive prior on logits.

    Args:
        rng (numpy.random.Generator): Seeded generator.
        num_classes (int): K.

    Returns:
        ParameterSet: Freshly initialised weights.
    """
    prior_bias = -np.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
    values = {}
    for name, shape in layer_shapes(num_classes):
        if name.endswith(".bias"):
            prior = name.startswith("head.objectness") or ".class." in name
            values[name] = np.full(shape, prior_bias if prior else 0.0)
        elif name.startswith("backbone"):
            fan_in = int(np.prod(shape[1:]))
            values[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            values[name] = rng.normal(0.0, 0.01, size=shape)
    return ParameterSet(values)


def anchors():
    """Default boxes of the 16x16 grid, row-major, shape (GRID*GRID, 4)."""
    centres = np.arange(GRID) * STRIDE + STRIDE / 2.0
    cy, cx = np.meshgrid(centres, centres, indexing="ij")
    half = ANCHOR_SIZE / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4)


@dataclass
class HeadOutputs:
    """Per-cell head outputs of a batch.

    Tensors are laid out (N, cells, width). ``boxes[k]`` is the stage-k box
    Tensor in image units; ``boxes[0]`` holds the anchors.
    """

    features: list
    objectness: T.Tensor
    proposals: T.Tensor
    class_logits: list
    deltas: list
    spreads: list
    boxes: list = field(default_factory=list)

    @property
    def batch_size(self):
        return self.objectness.shape[0]


def check_scaling(params, scaling):
    if scaling is None:
        return
    if scaling.names() != params.names():
        raise ShapeError("scaling set does not list the same layers as the parameter set")
    for name, weight in params.items():
        omega = scaling[name]
        if omega.ndim != 1 or omega.shape[0] not in (1, weight.shape[0]):
            raise ShapeError(f"scaling for {name} has shape {omega.shape}, weight has {weight.shape}")


def _weight(params, scaling, name):
    if scaling is None:
        return params[name]
    return T.channel_scale(params[name], scaling[name])


def _head(features, params, scaling, name):
    weight = _weight(params, scaling, f"{name}.weight")
    bias = _weight(params, scaling, f"{name}.bias")
    out = T.conv2d(features, weight, bias)
    n, width = out.shape[0], out.shape[1]
    return T.transpose(T.reshape(out, (n, width, -1)), (0, 2, 1))


def as_image_batch(images):
    """Stack H x W arrays (or an N x 1 x H x W array) into an input Tensor."""
    if isinstance(images, T.Tensor):
        return images
    array = np.asarray(images, dtype=np.float64)
    if array.ndim == 3:
        array = array[:, None, :, :]
    return T.Tensor(array)


def backbone(params, images, scaling=None):
    """Feature maps of both backbone stages (conv, relu, 2x2 max-pool each).

    Returns:
        list: [(N, 8, 32, 32), (N, 16, 16, 16)] Tensors.
    """
    x = as_image_batch(images)
    if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected images of shape (N, 1, {IMAGE_SIZE}, {IMAGE_SIZE}), got {x.shape}")
    check_scaling(params, scaling)
    features = []
    for name in ("backbone.conv1", "backbone.conv2"):
        weight = _weight(params, scaling, f"{name}.weight")
        bias = _weight(params, scaling, f"{name}.bias")
        x = T.max_pool2d(T.relu(T.conv2d(x, weight, bias, padding=1)))
        features.append(x)
    return features


def forward(params, images, scaling=None):
    """Run the detector, optionally with every weight scaled channel-wise.

    Args:
        params (ParameterSet): Detector weights.
        images: Tensor of shape (N, 1, 64, 64), or stackable arrays.
        scaling (ScalingSet, optional): Coefficients aligned with ``params``.

    Returns:
        HeadOutputs: Head tensors plus the per-stage box arrays.
    """
    features = backbone(params, images, scaling)
    x = features[-1]
    outputs = HeadOutputs(
        features=features,
        objectness=T.reshape(_head(x, params, scaling, "head.objectness"), (x.shape[0], -1)),
        proposals=_head(x, params, scaling, "head.proposal"),
        class_logits=[],
        deltas=[],
        spreads=[],
    )
    box = T.Tensor(np.broadcast_to(anchors(), (x.shape[0], GRID * GRID, 4)))
    outputs.boxes.append(box)
    for k in range(1, NUM_STAGES + 1):
        delta = _head(x, params, scaling, f"head.stage{k}.box")
        outputs.class_logits.append(_head(x, params, scaling, f"head.stage{k}.class"))
        outputs.deltas.append(delta)
        outputs.spreads.append(
            T.add_scalar(T.softplus(_head(x, params, scaling, f"head.stage{k}.spread")), SPREAD_FLOOR)
        )
        box = T.add(box, T.mul_scalar(delta, ANCHOR_SIZE))
        outputs.boxes.append(box)
    return outputs


# Losses


def cross_entropy(logits, target):
    """-log softmax(logits)[target].

    A 1-D ``logits`` gives a scalar; a 2-D (M, C) ``logits`` with M targets
    gives the per-row losses.
    """
    classes = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= classes):
        raise ValueError(f"target class out of range [0, {classes})")
    one_hot = np.eye(classes)[target]
    picked = T.mul(T.log_softmax(logits, axis=-1), T.Tensor(one_hot))
    if logits.ndim == 1:
        return -T.reduce_sum(picked)
    return -T.reduce_sum(picked, axis=-1)


def _weighted_sum(values, weights):
    if weights is None:
        return T.reduce_sum(values)
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), values.shape)
    return T.reduce_sum(T.mul(values, T.Tensor(weights)))


def smooth_l1(pred, target, weights=None):
    """Sum of 0.5 d^2 (|d| < 1) or |d| - 0.5 over coordinates."""
    target = T.as_tensor(target)
    diff = T.absolute(T.sub(pred, target))
    q = T.clip(diff, 0.0, 1.0)
    per_coordinate = T.add(T.mul_scalar(T.mul(q, q), 0.5), T.sub(diff, q))
    return _weighted_sum(per_coordinate, weights)


def focal_loss(prob, alpha=0.25, gamma=2.0, weights=None):
    """-alpha (1 - p)^gamma log p, summed.

    Args:
        prob (Tensor): Probability of the true class, each in (0, 1].
    """
    if np.any(prob.data <= 0.0):
        raise ValueError("focal_loss needs probabilities > 0")
    modulator = T.power(T.add_scalar(T.mul_scalar(prob, -1.0), 1.0), gamma)
    per_item = T.mul_scalar(T.mul(modulator, T.log(prob)), -alpha)
    return _weighted_sum(per_item, weights)


def sigmoid_focal(logits, targets, alpha=0.25, gamma=2.0, weights=None):
    """Per-class sigmoid focal loss from logits.

    Positives (target 1) are weighted by alpha and negatives by 1 - alpha.
    """
    targets = np.asarray(targets, dtype=np.float64)
    signed = T.mul(logits, T.Tensor(2.0 * targets - 1.0))
    miss = T.sigmoid(T.mul_scalar(signed, -1.0))
    neg_log_hit = T.softplus(T.mul_scalar(signed, -1.0))
    balance = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    per_item = T.mul(T.mul(T.power(miss, gamma), neg_log_hit), T.Tensor(balance))
    return _weighted_sum(per_item, weights)


def npll_standin(pred, spread, target, rho=0.25, weights=None):
    """Power-weighted Laplace negative log-likelihood.

    rho * (|target - pred| / spread + ln(2 spread)), summed over boundaries.
    """
    if np.any(spread.data <= 0.0):
        raise ValueError("npll_standin needs a positive spread")
    target = T.as_tensor(target)
    residual = T.div(T.absolute(T.sub(target, pred)), spread)
    per_boundary = T.mul_scalar(T.add(residual, T.log(T.mul_scalar(spread, 2.0))), rho)
    return _weighted_sum(per_boundary, weights)


def target_arrays(objects):
    """(boxes (T, 4), classes (T,)) from ground truths or pseudo-labels."""
    objects = list(objects or [])
    boxes = np.array([o.box for o in objects], dtype=np.float64).reshape(-1, 4)
    classes = np.array([o.class_id for o in objects], dtype=np.int64)
    return boxes, classes


def target_spreads(objects):
    """Per-boundary spread (T, 4) carried by pseudo-labels; zero for exact ground truth."""
    objects = list(objects or [])
    spreads = [getattr(o, "spread", None) or (0.0,) * 4 for o in objects]
    return np.array(spreads, dtype=np.float64).reshape(-1, 4)


def assign(prior_boxes, gt_boxes, threshold):
    """Positive mask and assigned ground-truth index for each prior box.

    A prior is positive when its best IoU reaches ``threshold``; the best
    ground truth is the highest IoU, ties going to the lower index.
    """
    cells = prior_boxes.shape[0]
    if gt_boxes.shape[0] == 0:
        return np.zeros(cells, dtype=bool), np.zeros(cells, dtype=np.int64)
    overlaps = iou_matrix(prior_boxes, gt_boxes)
    best = overlaps.argmax(axis=1)
    return overlaps[np.arange(cells), best] >= threshold, best


def detection_loss(outputs, targets, config):
    """Objectness, proposal and per-stage cascade losses of a batch.

    Classification terms are averaged over all cells and regression and
    uncertainty terms over the positives of each image; images without
    positives contribute classification terms only. Per-image values are
    averaged over the batch.

    Args:
        outputs (HeadOutputs): Result of ``forward``.
        targets (list): Per-image lists of objects with class_id and box.
        config (LossConfig): Thresholds and loss switches.

    Returns:
        tuple: (total loss Tensor, dict of term name -> float).
    """
    n = outputs.batch_size
    if n == 0:
        raise ValueError("empty batch")
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} target lists for a batch of {n}")
    cells = outputs.objectness.shape[1]
    classes = outputs.class_logits[0].shape[2]
    cell_weight = np.full((n * cells, 1), 1.0 / (n * cells))
    gts = [target_arrays(t) for t in targets]
    target_spread = [target_spreads(t) for t in targets]

    def positives(stage):
        prior = outputs.boxes[stage - 1]
        mask = np.zeros((n, cells), dtype=bool)
        matched = prior.data.copy()
        matched_spread = np.zeros((n, cells, 4))
        labels = np.zeros((n, cells, classes))
        for i, (boxes, gt_classes) in enumerate(gts):
            mask[i], index = assign(prior.data[i], boxes, config.tau[stage - 1])
            if mask[i].any():
                matched[i][mask[i]] = boxes[index[mask[i]]]
                matched_spread[i][mask[i]] = target_spread[i][index[mask[i]]]
                labels[i, mask[i], gt_classes[index[mask[i]]]] = 1.0
        # (gt - prior) / anchor, zero off the positives; taped through the prior
        offsets = T.mul_scalar(T.sub(T.Tensor(matched), prior), 1.0 / ANCHOR_SIZE)
        reg_target = T.reshape(offsets, (n * cells, 4))
        counts = mask.sum(axis=1, keepdims=True)
        weight = np.where(mask, 1.0 / (n * np.maximum(counts, 1)), 0.0)
        return mask, reg_target, labels, weight.reshape(-1, 1), matched_spread.reshape(-1, 4)

    terms = {}
    stage_one = positives(1)
    first_mask, proposal_target, _, first_weight, _ = stage_one
    zeros = T.Tensor(np.zeros((n * cells, 1)))
    binary_logits = T.concat([zeros, T.reshape(outputs.objectness, (n * cells, 1))], axis=1)
    rpn_cls = _weighted_sum(cross_entropy(binary_logits, first_mask.reshape(-1)), cell_weight[:, 0])
    total = rpn_cls
    terms["rpn_cls"] = rpn_cls
    if config.box_regression:
        terms["rpn_reg"] = smooth_l1(
            T.reshape(outputs.proposals, (n * cells, 4)), proposal_target, first_weight
        )

    for k in range(1, config.stages + 1):
        _, reg_target, labels, weight, teacher_spread = stage_one if k == 1 else positives(k)
        terms[f"roi_cls_{k}"] = sigmoid_focal(
            T.reshape(outputs.class_logits[k - 1], (n * cells, classes)),
            labels.reshape(-1, classes),
            config.focal_alpha,
            config.focal_gamma,
            cell_weight,
        )
        if config.box_regression:
            delta = T.reshape(outputs.deltas[k - 1], (n * cells, 4))
            terms[f"roi_reg_{k}"] = smooth_l1(delta, reg_target, weight)
            if config.uncertainty_enabled:
                # a pseudo-label's own spread widens the scale the student is judged at
                spread = T.add(T.reshape(outputs.spreads[k - 1], (n * cells, 4)), T.Tensor(teacher_spread))
                terms[f"roi_unc_{k}"] = npll_standin(
                    delta, spread, reg_target, config.npll_rho, weight
                )

    for name, value in terms.items():
        if name != "rpn_cls":
            total = T.add(total, value)
    return total, {name: value.item() for name, value in terms.items()}


def supervised_loss(params, scaling, views, config):
    """Detection loss of labeled (strongly augmented) views.

    Args:
        params (ParameterSet): Detector weights.
        scaling (ScalingSet, optional): Channel scaling applied to every weight.
        views (list): Scenes carrying ground-truth objects.
        config (LossConfig): Loss configuration.

    Returns:
        Tensor: Scalar loss.
    """
    if not views:
        raise ValueError("supervised_loss needs a non-empty batch")
    outputs = forward(params, [v.image for v in views], scaling)
    total, terms = detection_loss(outputs, [v.objects for v in views], config)
    logging.debug("Supervised loss %.6f over %d views: %s", total.item(), len(views), terms)
    return total


# Decoding


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_id: int
    score: float
    spread: tuple


def decode(outputs, stages=NUM_STAGES, score_floor=0.0):
    """Per-image detections from the final enabled stage.

    Score is sigmoid(objectness) times the sigmoid of the winning class
    logit; boxes are clipped to the image and degenerate boxes dropped.

    Returns:
        list: One list of Detection per image, in cell order.
    """
    objectness = 0.5 * (1.0 + np.tanh(0.5 * outputs.objectness.data))
    logits = outputs.class_logits[stages - 1].data
    class_ids = logits.argmax(axis=-1)
    class_prob = 0.5 * (1.0 + np.tanh(0.5 * logits.max(axis=-1)))
    scores = objectness * class_prob
    boxes = np.clip(outputs.boxes[stages].data, 0.0, float(IMAGE_SIZE))
    spreads = outputs.spreads[stages - 1].data

    result = []
    for i in range(outputs.batch_size):
        valid = (
            (scores[i] >= score_floor)
            & (boxes[i, :, 2] - boxes[i, :, 0] > 1e-6)
            & (boxes[i, :, 3] - boxes[i, :, 1] > 1e-6)
        )
        result.append(
            [
                Detection(
                    box=tuple(float(v) for v in boxes[i, c]),
                    class_id=int(class_ids[i, c]),
                    score=float(scores[i, c]),
                    spread=tuple(float(v) for v in spreads[i, c]),
                )
                for c in np.nonzero(valid)[0]
            ]
        )
    return result
