"""Tensor core for the TMR-RD laboratory.

Dense float64 arrays with tape-based reverse-mode gradients and a central
finite-difference oracle. Every model, loss and update in the package is
built from the primitives defined here.

Shapes must match exactly for elementwise operations. The only implicit
broadcast is ``channel_scale``, which stretches one coefficient per
output channel (or one per tensor) across the remaining axes.
"""

import hashlib
import logging
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DivergenceError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    """Return the innermost GradTape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A row-major float64 array with an optional gradient buffer.

    Tensors are treated as immutable values once created; operations
    always return new tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name
        _check_finite("tensor", self.data)

    @classmethod
    def _wrap(cls, array):
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.grad = None
        tensor.requires_grad = False
        tensor.is_leaf = True
        tensor.name = None
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class _Record:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op, output, inputs, backward_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of primitive operations and their backward rules.

    Used as a context manager; operations on tensors that require
    gradients are recorded while the tape is active on this thread.
    One tape belongs to one training context and is never shared.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)
        return False

    def record(self, op, output, inputs, backward_fn):
        self.records.append(_Record(op, output, inputs, backward_fn))

    def backward(self, root):
        """Replay the tape in reverse and store dL/dleaf on every leaf.

        Args:
            root (Tensor): Scalar loss produced while this tape was active.

        Returns:
            list: The leaf tensors that received a gradient, in first-use order.
        """
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")

        leaves = {}
        for record in self.records:
            for tensor in record.inputs:
                if tensor.requires_grad and tensor.is_leaf:
                    leaves.setdefault(id(tensor), tensor)

        grads = {id(root): np.ones_like(root.data)}
        for record in reversed(self.records):
            upstream = grads.pop(id(record.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        if root.is_leaf and root.requires_grad:
            leaves.setdefault(id(root), root)
        for key, leaf in leaves.items():
            grad = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if grad is None else np.reshape(grad, leaf.shape)

        logging.debug("Backward replayed %d ops into %d leaves.", len(self.records), len(leaves))
        self.records.clear()
        return list(leaves.values())


def backward(root):
    """Run backward on the active tape of this thread."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward() called without an active GradTape")
    return tape.backward(root)


def _check_finite(op, array):
    if not np.all(np.isfinite(array)):
        raise DivergenceError(f"non-finite values produced by {op}")


def _result(op, array, inputs, backward_fn):
    _check_finite(op, array)
    out = Tensor._wrap(array)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(op, out, inputs, backward_fn)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(x):
    """Same values, cut from the tape."""
    return Tensor._wrap(x.data)


# Elementwise arithmetic


def add(a, b):
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise DivergenceError("div: zero denominator")
    out = a.data / b.data
    return _result("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def add_scalar(a, c):
    return _result("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def mul_scalar(a, c):
    c = float(c)
    return _result("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def power(x, p):
    """Elementwise x**p for a constant exponent p."""
    p = float(p)
    out = np.power(x.data, p)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * np.power(x.data, p - 1.0)
        return (g * np.where(np.isfinite(local), local, 0.0),)

    return _result("power", out, (x,), backward)


def absolute(x):
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, low, high):
    out = np.clip(x.data, low, high)
    inside = (x.data >= low) & (x.data <= high)
    return _result("clip", out, (x,), lambda g: (g * inside,))


# Nonlinearities


def relu(x):
    out = np.maximum(x.data, 0.0)
    return _result("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    out = np.logaddexp(0.0, x.data)
    slope = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("softplus", out, (x,), lambda g: (g * slope,))


def log(x):
    if np.any(x.data <= 0.0):
        raise DivergenceError("log of a non-positive value")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


# Reductions and layout


def reduce_sum(x, axis=None):
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(np.reshape(g, -1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result("sum", np.asarray(out, dtype=np.float64), (x,), backward)


def reduce_mean(x, axis=None):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(reduce_sum(x, axis), 1.0 / count)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as error:
        raise ShapeError(f"reshape: {error}") from error
    return _result("reshape", out, (x,), lambda g: (np.reshape(g, x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as error:
        raise ShapeError(f"concat: {error}") from error
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tensors, backward)


def flip_width(x, mask=None):
    """Reverse the last axis of every sample (axis 0) selected by ``mask``."""
    if mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError(f"flip_width: mask of shape {mask.shape} for batch {x.shape[0]}")

    def flipped(array):
        out = array.copy()
        out[mask] = array[mask][..., ::-1]
        return out

    return _result("flip_width", flipped(x.data), (x,), lambda g: (flipped(g),))


# Linear algebra and convolution


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data
    return _result("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def channel_scale(weight, omega):
    """Multiply ``weight`` by one coefficient per output channel.

    ``omega`` has length ``weight.shape[0]`` (per channel) or 1 (per tensor)
    and is broadcast over all remaining axes.
    """
    if omega.ndim != 1 or omega.shape[0] not in (1, weight.shape[0]):
        raise ShapeError(
            f"channel_scale: omega of shape {omega.shape} does not fit weight {weight.shape}"
        )
    factor = omega.data.reshape((-1,) + (1,) * (weight.ndim - 1))
    out = weight.data * factor

    def backward(g):
        per_channel = (g * weight.data).reshape(weight.shape[0], -1).sum(axis=1)
        if omega.shape[0] == 1:
            per_channel = per_channel.sum(keepdims=True)
        return (g * factor, per_channel)

    return _result("channel_scale", out, (weight, omega), backward)


def conv2d(x, weight, bias=None, padding=0):
    """Stride-1 2D convolution of an NCHW batch with an OCKK kernel.

    Args:
        x (Tensor): Input of shape (N, C, H, W).
        weight (Tensor): Kernel of shape (O, C, kh, kw).
        bias (Tensor, optional): Per-output-channel bias of shape (O,).
        padding (int): Zero padding on each spatial border.

    Returns:
        Tensor: Output of shape (N, O, H + 2p - kh + 1, W + 2p - kw + 1).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not fit kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not fit kernel {weight.shape}")

    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad)
    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    kernel = weight.data.reshape(o, -1)
    out = cols @ kernel.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        flat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grad_weight = (flat.T @ cols).reshape(weight.shape)
        grad_cols = (flat @ kernel).reshape(n, oh, ow, c, kh, kw)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + oh, j:j + ow] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grad_bias = flat.sum(axis=0) if bias is not None else None
        return (grad_x, grad_weight, grad_bias)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, backward)


def max_pool2d(x, size=2):
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"max_pool2d: {x.shape} is not divisible by window {size}")
    n, c, h, w = x.shape
    blocks = (
        x.data.reshape(n, c, h // size, size, w // size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // size, w // size, size * size)
    )
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, winner, g[..., None], axis=-1)
        grad = (
            grad_blocks.reshape(n, c, h // size, w // size, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad,)

    return _result("max_pool2d", out, (x,), backward)


class NamedTensors:
    """Ordered layer-name → Tensor map.

    Base of ParameterSet and ScalingSet; names are unique and keep
    insertion order.
    """

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, value in (tensors or {}).items():
            self._tensors[name] = value if isinstance(value, Tensor) else Tensor(value, name=name)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return f"{type(self).__name__}({len(self)} tensors)"

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def shapes(self):
        return {name: tensor.shape for name, tensor in self._tensors.items()}

    def copy(self):
        return type(self)({name: Tensor(t.data, name=name) for name, t in self._tensors.items()})

    def as_leaves(self):
        """Fresh gradient leaves holding copies of the current values."""
        return type(self)(
            {name: Tensor(t.data, requires_grad=True, name=name) for name, t in self._tensors.items()}
        )

    def detached(self):
        """Same values, none of them taped."""
        return type(self)({name: detach(t) for name, t in self._tensors.items()})

    def gradients(self):
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._tensors.items()
        }

    def equals(self, other):
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[name].data) for name, t in self._tensors.items())

    def fingerprint(self):
        digest = hashlib.sha256()
        for name, t in self._tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return digest.hexdigest()


def finite_diff_check(loss_fn, params, h=1e-5, coords=None, rng=None, atol=0.0):
    """Compare tape gradients against central finite differences.

    Args:
        loss_fn (callable): Zero-argument function returning a scalar Tensor;
            must read the current values of ``params``.
        params: Leaf tensors (sequence or NamedTensors) with requires_grad.
        h (float): Central-difference step.
        coords (int, optional): Check only this many randomly chosen coordinates.
        rng (numpy.random.Generator, optional): Source for the coordinate sample.
        atol (float): Discrepancies at or below this are counted as exact.

    Returns:
        float: max |analytic - central| / max(|analytic|, |central|, 1e-12).
    """
    if h <= 0:
        raise ValueError("finite_diff_check needs h > 0")
    leaves = list(params.values()) if isinstance(params, NamedTensors) else list(params)
    for leaf in leaves:
        leaf.grad = None

    with GradTape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    pairs = [(i, j) for i, leaf in enumerate(leaves) for j in range(leaf.size)]
    if coords is not None and coords < len(pairs):
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = np.sort(rng.choice(len(pairs), size=coords, replace=False))
        pairs = [pairs[k] for k in chosen]

    def evaluate():
        value = loss_fn().item()
        if not np.isfinite(value):
            raise DivergenceError("finite_diff_check: non-finite loss")
        return value

    worst = 0.0
    for i, j in pairs:
        flat = leaves[i].data.reshape(-1)
        original = flat[j]
        try:
            flat[j] = original + h
            upper = evaluate()
            flat[j] = original - h
            lower = evaluate()
        finally:
            flat[j] = original
        central = (upper - lower) / (2.0 * h)
        exact = analytic[i].reshape(-1)[j]
        gap = abs(exact - central)
        if gap <= atol:
            continue
        error = gap / max(abs(exact), abs(central), 1e-12)
        if error > worst:
            worst = error
            logging.debug("finite_diff_check: new worst %.3e at tensor %d coord %d", error, i, j)
    return worst
