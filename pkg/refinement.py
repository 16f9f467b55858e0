"""Teacher refinement: classical EMA and training-based model refinement.

The TMR stage freezes both weight sets, learns per-channel scaling
coefficients on labeled data by plain gradient descent, then mixes
teacher and student channel by channel with the learned coefficients.
"""

import logging
from dataclasses import dataclass

import numpy as np

import detector
import tensor as T
from errors import ConfigError, ShapeError

EPSILON = 1e-4


class ScalingSet(T.NamedTensors):
    """Scaling coefficients, one vector per layer of an aligned ParameterSet."""

    @classmethod
    def ones_like(cls, params, per_tensor=False):
        return cls(
            {name: np.ones(1 if per_tensor else t.shape[0]) for name, t in params.items()}
        )

    def clamp(self):
        return type(self)(
            {name: np.clip(t.data, EPSILON, 1.0) for name, t in self.items()}
        )

    def check_aligned(self, params):
        if self.names() != params.names():
            raise ShapeError("scaling set layers differ from the parameter set")
        for name, weight in params.items():
            length = self[name].shape
            if len(length) != 1 or length[0] not in (1, weight.shape[0]):
                raise ShapeError(f"scaling for {name} has shape {length}, weight has {weight.shape}")


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError([f"alpha must lie in (0, 1), got {self.alpha}"])

    def step(self, theta_t, theta_s):
        return ema_step(theta_t, theta_s, self.alpha)


def ema_step(theta_t, theta_s, alpha):
    """alpha * theta_t + (1 - alpha) * theta_s, layer by layer."""
    theta_t.check_aligned(theta_s)
    return detector.ParameterSet(
        {
            name: alpha * t.data + (1.0 - alpha) * theta_s[name].data
            for name, t in theta_t.items()
        }
    )


def ema_unrolled(theta_t0, student_history, alpha, n):
    """Closed form of n EMA steps.

    alpha^n theta_t0 + (1 - alpha) sum_k alpha^(n-1-k) theta_s^k for k < n.
    """
    if len(student_history) < n:
        raise ValueError(f"need {n} student snapshots, got {len(student_history)}")
    for snapshot in student_history[:n]:
        theta_t0.check_aligned(snapshot)
    values = {}
    for name, t in theta_t0.items():
        acc = alpha ** n * t.data
        for k in range(n):
            acc = acc + (1.0 - alpha) * alpha ** (n - 1 - k) * student_history[k][name].data
        values[name] = acc
    return detector.ParameterSet(values)


def tmr_loss(theta_t, omega_t, theta_s, omega_s, batch, lambda_t, lambda_s, config):
    """lambda_t L_sc(theta_t; omega_t) + lambda_s L_sc(theta_s; omega_s).

    The weight sets are read frozen; only the scaling sets can be leaves.
    """
    if not batch:
        raise ValueError("tmr_loss needs a non-empty labeled batch")
    teacher = T.mul_scalar(
        detector.supervised_loss(theta_t.detached(), omega_t, batch, config), lambda_t
    )
    if lambda_s == 0.0:
        return teacher
    student = T.mul_scalar(
        detector.supervised_loss(theta_s.detached(), omega_s, batch, config), lambda_s
    )
    return T.add(teacher, student)


def optimize_scaling(objective, scalings, gamma, steps):
    """Projected gradient descent on scaling sets.

    Args:
        objective (callable): Maps the list of leaf scaling sets to a scalar Tensor.
        scalings (list): Starting ScalingSets.
        gamma (float): Learning rate (0 leaves the coefficients unchanged).
        steps (int): Number of descent steps.

    Returns:
        tuple: (list of updated ScalingSets, loss trace before each step).
    """
    if steps < 1:
        raise ValueError("need at least one descent step")
    if gamma < 0.0:
        raise ValueError("learning rate must not be negative")
    trace = []
    current = [s.copy() for s in scalings]
    for _ in range(steps):
        leaves = [s.as_leaves() for s in current]
        with T.GradTape() as tape:
            loss = objective(leaves)
            tape.backward(loss)
        trace.append(loss.item())
        current = []
        for leaf in leaves:
            grads = leaf.gradients()
            stepped = {name: t.data - gamma * grads[name] for name, t in leaf.items()}
            current.append(type(leaf)(stepped).clamp())
    return current, trace


def tmr_optimize(
    theta_t,
    theta_s,
    omega_t,
    omega_s,
    labeled_batches,
    gamma,
    n_prime,
    lambda_t=1.0,
    lambda_s=4.0,
    config=None,
):
    """Learn Omega_t and Omega_s for n_prime steps with both weight sets frozen.

    Args:
        labeled_batches: A fixed list of strongly augmented labeled views, or
            a callable ``step -> views`` drawing a fresh batch per step.

    Returns:
        tuple: (omega_t', omega_s', loss trace).
    """
    config = config or detector.LossConfig()
    omega_t.check_aligned(theta_t)
    omega_s.check_aligned(theta_s)
    step = {"index": 0}

    def objective(leaves):
        batch = labeled_batches(step["index"]) if callable(labeled_batches) else labeled_batches
        step["index"] += 1
        return tmr_loss(theta_t, leaves[0], theta_s, leaves[1], batch, lambda_t, lambda_s, config)

    (new_t, new_s), trace = optimize_scaling(objective, [omega_t, omega_s], gamma, n_prime)
    logging.info("TMR optimisation: loss %.6f -> %.6f over %d steps.", trace[0], trace[-1], n_prime)
    return new_t, new_s, trace


def mixing_coefficients(omega_t, omega_s):
    """m = omega_t / (omega_t + omega_s), per layer."""
    mixing = {}
    for name, t in omega_t.items():
        total = t.data + omega_s[name].data
        if np.any(total <= 0.0):
            raise ValueError(f"scaling coefficients of {name} sum to zero")
        mixing[name] = t.data / total
    return mixing


def refine_weights(theta_t, theta_s, omega_t, omega_s):
    """Channel-wise convex mixing of teacher and student.

    theta_t' = m theta_t + (1 - m) theta_s and theta_s' = (1 - m) theta_t + m theta_s.

    Returns:
        tuple: (refined teacher, refined student).
    """
    theta_t.check_aligned(theta_s)
    omega_t.check_aligned(theta_t)
    omega_s.check_aligned(theta_s)
    mixing = mixing_coefficients(omega_t, omega_s)
    teacher, student = {}, {}
    for name, t in theta_t.items():
        m = mixing[name].reshape((-1,) + (1,) * (t.ndim - 1))
        s = theta_s[name].data
        teacher[name] = m * t.data + (1.0 - m) * s
        student[name] = (1.0 - m) * t.data + m * s
    mean_m = float(np.mean(np.concatenate([v.ravel() for v in mixing.values()])))
    logging.info("Refined weights with mean mixing coefficient %.4f.", mean_m)
    return detector.ParameterSet(teacher), detector.ParameterSet(student)
