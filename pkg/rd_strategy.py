"""Representation disagreement between teacher and student.

Backbone feature maps become per-location distributions over channels.
The student is pushed away from the teacher by ascending
KL(p_student || p_teacher) while it descends the pseudo-label loss.
"""

import logging
from dataclasses import dataclass

import numpy as np

import detector
import tensor as T
from errors import ShapeError


@dataclass
class RepresentationDistribution:
    """Channel distributions of the two backbone levels, each (N, C, H, W)."""

    probs: list
    log_probs: list

    @classmethod
    def from_features(cls, features, flips=None):
        probs, log_probs = [], []
        for level in features:
            p = T.softmax(level, axis=1)
            log_p = T.log_softmax(level, axis=1)
            if flips is not None and np.any(flips):
                p = T.flip_width(p, flips)
                log_p = T.flip_width(log_p, flips)
            probs.append(p)
            log_probs.append(log_p)
        return cls(probs, log_probs)

    @classmethod
    def from_probs(cls, arrays):
        """Wrap hand-made probability arrays (channels on axis 1)."""
        probs = [T.Tensor(a) for a in arrays]
        return cls(probs, [T.Tensor(np.log(p.data)) for p in probs])

    def detached(self):
        return RepresentationDistribution(
            [T.detach(p) for p in self.probs], [T.detach(p) for p in self.log_probs]
        )


def representation_probs(params, views, flips=None, scaling=None):
    """Distributions of the last two backbone levels.

    Feature maps of flipped views are flipped back so every location lines
    up with the unflipped base frame.
    """
    features = detector.backbone(params, [v.image for v in views], scaling)
    return RepresentationDistribution.from_features(features, flips)


def rd_loss(p_student, p_teacher):
    """KL(p_student || p_teacher), averaged over locations and levels.

    The teacher side is read as a constant.
    """
    if len(p_student.probs) != len(p_teacher.probs):
        raise ShapeError("distributions have a different number of levels")
    levels = []
    for p_s, log_s, log_t in zip(p_student.probs, p_student.log_probs, p_teacher.log_probs):
        if p_s.shape != log_t.shape:
            raise ShapeError(f"rd_loss: student level {p_s.shape} vs teacher level {log_t.shape}")
        gap = T.sub(log_s, T.detach(log_t))
        levels.append(T.reduce_mean(T.reduce_sum(T.mul(p_s, gap), axis=1)))
    total = levels[0]
    for level in levels[1:]:
        total = T.add(total, level)
    return T.mul_scalar(total, 1.0 / len(levels))


def student_objective(
    theta_s,
    pairs,
    pseudo_labels,
    teacher,
    lambda_u,
    lambda_d,
    config=None,
    labeled_batch=None,
    labeled_config=None,
):
    """L_sup + lambda_u L_unsup - lambda_d L_RD on the student's strong views.

    Args:
        theta_s (ParameterSet): Student weights (leaves when differentiating).
        pairs (list): AugmentedPairs of the unlabeled batch.
        pseudo_labels (list): Per-pair PseudoLabel lists in the base frame.
        teacher: Teacher ParameterSet or a precomputed RepresentationDistribution
            of the weak views.
        lambda_u (float): Unsupervised weight.
        lambda_d (float): Disagreement weight.
        config (LossConfig): Loss settings for pseudo-label targets.
        labeled_batch (list, optional): Strong labeled views for L_sup.
        labeled_config (LossConfig, optional): Loss settings for L_sup.

    Returns:
        tuple: (objective Tensor, dict of float statistics).
    """
    config = config or detector.LossConfig()
    if isinstance(teacher, RepresentationDistribution):
        p_teacher = teacher
    else:
        p_teacher = representation_probs(
            teacher.detached(), [p.weak for p in pairs], [p.flip_applied for p in pairs]
        )

    outputs = detector.forward(theta_s, [p.strong.image for p in pairs])
    stats = {"loss_sup": 0.0, "loss_unsup": 0.0, "pseudo_labels": sum(len(x) for x in pseudo_labels)}
    parts = []

    if stats["pseudo_labels"]:
        unsup, _ = detector.detection_loss(outputs, pseudo_labels, config)
        stats["loss_unsup"] = unsup.item()
        if lambda_u:
            parts.append(T.mul_scalar(unsup, lambda_u))

    rd = rd_loss(RepresentationDistribution.from_features(outputs.features), p_teacher)
    stats["loss_rd"] = rd.item()
    if lambda_d:
        parts.append(T.mul_scalar(rd, -lambda_d))

    if labeled_batch:
        sup = detector.supervised_loss(theta_s, None, labeled_batch, labeled_config or config)
        stats["loss_sup"] = sup.item()
        parts.append(sup)

    if not parts:
        return T.mul_scalar(rd, 0.0), stats
    objective = parts[0]
    for part in parts[1:]:
        objective = T.add(objective, part)
    return objective, stats


def student_step(
    theta_s,
    pairs,
    pseudo_labels,
    teacher,
    xi,
    lambda_u,
    lambda_d,
    gradient_ascent=False,
    labeled_batch=None,
    config=None,
    labeled_config=None,
):
    """One SGD step of the student.

    Descends the combined objective, so L_unsup goes down and L_RD goes up.
    ``gradient_ascent`` adds the gradient instead of subtracting it.

    Returns:
        tuple: (new student ParameterSet, dict of float statistics).
    """
    if xi <= 0.0:
        raise ValueError("student learning rate must be positive")
    leaves = theta_s.as_leaves()
    with T.GradTape() as tape:
        objective, stats = student_objective(
            leaves, pairs, pseudo_labels, teacher, lambda_u, lambda_d, config, labeled_batch, labeled_config
        )
        tape.backward(objective)
    direction = xi if gradient_ascent else -xi
    grads = leaves.gradients()
    stats["objective"] = objective.item()
    logging.debug("Student step: %s", stats)
    return detector.ParameterSet({name: t.data + direction * grads[name] for name, t in leaves.items()}), stats


def mean_representation_kl(teacher_params, student_params, scenes):
    """KL(p_student || p_teacher) on the same unaugmented images."""
    p_teacher = representation_probs(teacher_params.detached(), scenes)
    p_student = representation_probs(student_params.detached(), scenes)
    return rd_loss(p_student, p_teacher).item()
