"""Reverse-mode differentiable array engine for the masked-image ViT.

Tensors wrap contiguous float64 numpy arrays. Every primitive application is
recorded on a thread-local tape whenever an operand requires gradients;
:func:`backward` replays the recorded local rules in reverse, accumulating
gradients additively into ``.grad``, then clears the tape. The op set is
exactly what the model needs: matrix products, trailing-axis bias addition,
layer normalization, GELU, softmax, cross entropy, and the index plumbing for
token sequences. No views, no in-place math, no broadcasting beyond a
trailing-shape operand.

A tape and the tensors recorded on it form a single-threaded unit. Each
thread gets its own tape, so independent forward/backward passes may run in
parallel threads; sharing one graph across threads is not supported.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, LabelError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        data = np.asarray(values, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic builds the graph through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)


class _TapeEntry:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule  # rule(grad_out) -> per-input gradient arrays


class Tape:
    """Ordered record of primitive applications, replayed in reverse."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __len__(self):
        return len(self.entries)


_LOCAL = threading.local()


def active_tape() -> Tape:
    tape = getattr(_LOCAL, "tape", None)
    if tape is None:
        tape = Tape()
        _LOCAL.tape = tape
    return tape


def _recording() -> bool:
    return getattr(_LOCAL, "recording", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    previous = _recording()
    _LOCAL.recording = False
    try:
        yield
    finally:
        _LOCAL.recording = previous


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(inputs, out_data, rule) -> Tensor:
    tracked = _recording() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        active_tape().entries.append(_TapeEntry(tuple(inputs), out, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (the operand was a trailing-shape broadcast)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from `loss`.

    Gradients accumulate additively, both across shared subexpressions within
    one call and across calls (zero grads between steps). The thread's tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        grad_out = entry.output.grad
        if grad_out is None:
            continue
        for operand, grad in zip(entry.inputs, entry.rule(grad_out)):
            if grad is None or not operand.requires_grad:
                continue
            if operand.grad is None:
                operand.grad = np.zeros_like(operand.data)
            operand.grad += grad
    tape.entries.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        # only trailing-shape broadcasts (bias rows, scalars) are supported
        small, big = (a, b) if a.ndim <= b.ndim else (b, a)
        if small.shape != big.shape[big.ndim - small.ndim:]:
            raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), out, rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape} are incompatible")
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _apply((a, b), out, rule)


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} are incompatible")
    out = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply((a, b), out, rule)


def matmul(a, b) -> Tensor:
    """Matrix product; stacked inputs (ndim > 2) must share leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or stacked operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def rule(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _apply((a, b), out, rule)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    out = a.data.reshape(shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return _apply((a,), out, rule)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def rule(g):
        return (g.transpose(inverse),)

    return _apply((a,), out, rule)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; gradient scatter-adds back (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def rule(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _apply((a,), out, rule)


def concat_rows(parts) -> Tensor:
    """Concatenate along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of zero parts")
    tail = parts[0].shape[1:]
    if any(p.shape[1:] != tail for p in parts):
        raise ShapeError(f"concat_rows shapes disagree: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _apply(tuple(parts), out, rule)


def repeat_row(v: Tensor, count: int) -> Tensor:
    """Stack `count` copies of a 1-d vector into a matrix."""
    if v.ndim != 1:
        raise ShapeError(f"repeat_row expects a vector, got shape {v.shape}")
    out = np.repeat(v.data[None, :], int(count), axis=0)

    def rule(g):
        return (g.sum(axis=0),)

    return _apply((v,), out, rule)


def reduce_sum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def rule(g):
        return (np.full(a.shape, float(g)),)

    return _apply((a,), out, rule)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        size = a.data.size
        out = a.data.mean()

        def rule(g):
            return (np.full(a.shape, float(g) / size),)

        return _apply((a,), out, rule)

    axis = int(axis)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    extent = a.shape[axis]
    out = a.data.mean(axis=axis)

    def rule(g):
        return (np.repeat(np.expand_dims(g / extent, axis), extent, axis=axis),)

    return _apply((a,), out, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis (population variance), then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm width mismatch: x has last axis {width}, "
            f"gain {gain.shape}, bias {bias.shape}"
        )
    if not eps > 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gain.data * xhat + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        d_gain = (g * xhat).sum(axis=lead)
        d_bias = g.sum(axis=lead)
        gh = g * gain.data
        d_x = inv * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return d_x, d_gain, d_bias

    return _apply((x, gain, bias), out, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def rule(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _apply((x,), out, rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted exponentiation normalized along `axis`."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _apply((x,), s, rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    idx = [int(v) for v in labels]
    if len(idx) != batch:
        raise ShapeError(f"{len(idx)} labels for batch of {batch}")
    for i, v in enumerate(idx):
        if not 0 <= v < classes:
            raise LabelError(f"label {v} at index {i} outside [0, {classes})")
    idx = np.asarray(idx, dtype=np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    out = np.mean(lse - shifted[np.arange(batch), idx])

    def rule(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(batch), idx] -= 1.0
        return (float(g) * p / batch,)

    return _apply((logits,), out, rule)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f, params, h: float = 1e-5):
    """Central-difference gradient of a scalar function, never touching the tape.

    `f` is called with no arguments and must read the current values of
    `params` (a Tensor or an iterable of Tensors); it must be deterministic.
    Returns arrays matching the parameter shapes.
    """
    single = isinstance(params, Tensor)
    tensors = [params] if single else list(params)
    grads = []
    with no_grad():
        for p in tensors:
            estimate = np.zeros_like(p.data)
            flat_values = p.data.reshape(-1)
            flat_grad = estimate.reshape(-1)
            for i in range(flat_values.size):
                saved = flat_values[i]
                flat_values[i] = saved + h
                f_plus = float(f())
                flat_values[i] = saved - h
                f_minus = float(f())
                flat_values[i] = saved
                flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
            grads.append(estimate)
    return grads[0] if single else grads


def max_relative_error(analytic, reference, floor: float = 1e-3) -> float:
    """Max over scalars of |a - r| / max(|a|, |r|, floor).

    The floor guards the ratio where both gradients are near zero (relative
    error is undefined there); below the floor this is an absolute comparison
    at floor-scaled tolerance, far tighter than central-difference noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - r) / denom))
