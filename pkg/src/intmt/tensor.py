"""Dense FP32 tensors and reverse-mode autodiff on a define-by-run tape.

The graph is rebuilt on every forward pass: each op attaches a record to
its output holding the input tensors and a backward rule.  Records carry
a global creation index, so creation order is a topological order by
construction and `backward` replays the reachable records exactly once,
newest first.

Storage is float32 throughout, including matmul accumulation; at the
matrix sizes this library targets, float64 accumulation buys nothing.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, GradientStateError, ShapeMismatchError

_op_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Disable graph recording inside a `with` block (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float32 array with an optional gradient buffer of the same shape."""

    def __init__(self, data, creator: "OpRecord | None" = None):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.creator = creator

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A trainable leaf tensor.  `frozen` parameters are skipped by optimizers."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable
        self.frozen = False

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class OpRecord:
    """One node of the tape: inputs, output, and the rule mapping the
    output gradient to per-input gradients (None = no gradient)."""

    __slots__ = ("index", "inputs", "output", "backward_fn", "name")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                 name: str):
        self.index = next(_op_counter)
        self.inputs = list(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


def record(output: Tensor, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    """Attach an op record to `output` when grad recording is enabled."""
    if _grad_enabled:
        output.creator = OpRecord(inputs, output, backward_fn, name)
    return output


def backward(loss: Tensor) -> int:
    """Backpropagate from a scalar loss node.

    Populates `.grad` on every tensor reachable from the loss (gradients
    accumulate additively, zero them between steps) and returns the
    number of op records visited, which callers may assert equals the
    number of distinct ops in the graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if getattr(loss, "_backward_done", False):
        raise GradientStateError(
            "backward already ran on this graph; results would double-accumulate")
    loss._backward_done = True

    records: list[OpRecord] = []
    seen: set[int] = set()
    stack = [loss.creator] if loss.creator is not None else []
    while stack:
        rec = stack.pop()
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        records.append(rec)
        for t in rec.inputs:
            if t.creator is not None and id(t.creator) not in seen:
                stack.append(t.creator)
    records.sort(key=lambda r: r.index)

    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(records):
        grads = rec.backward_fn(rec.output.grad)
        for t, g in zip(rec.inputs, grads):
            if g is not None:
                t.accumulate_grad(g)
    return len(records)


# ---------------------------------------------------------------------------
# ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) axes broadcast like np.matmul."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return record(out, [a, b], backward_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, [a, b], backward_fn, "add")


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * np.float32(c))

    def backward_fn(g):
        return (g * np.float32(c),)

    return record(out, [a], backward_fn, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))

    def backward_fn(g):
        return (g * mask,)

    return record(out, [a], backward_fn, "relu")


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return record(out, [a], backward_fn, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return record(out, [a], backward_fn, "transpose")


def softmax_values(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable softmax; shared by the graph op and integer paths."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = softmax_values(a.data, axis)
    out = Tensor(y)

    def backward_fn(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return record(out, [a], backward_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.data.size != d or bias.data.size != d:
        raise ShapeMismatchError(
            f"layer_norm: last axis {d} vs gain {gain.data.size}, bias {bias.data.size}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = centered * inv
    out = Tensor(gain.data * xhat + bias.data)

    def backward_fn(g):
        dxhat = g * gain.data
        # reduce over every axis but the feature axis
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red).reshape(gain.shape)
        dbias = g.sum(axis=red).reshape(bias.shape)
        dx = (inv / d) * (d * dxhat
                          - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx.astype(np.float32), dgain, dbias

    return record(out, [x, gain, bias], backward_fn, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return record(out, [table], backward_fn, "embedding")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    out = Tensor(a.data * keep)

    def backward_fn(g):
        return (g * keep,)

    return record(out, [a], backward_fn, "dropout")


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward_fn(g):
        return (np.broadcast_to(g, a.shape).astype(np.float32),)

    return record(out, [a], backward_fn, "sum_all")


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood of `targets` over non-pad positions.

    `logits` is [n, vocab]; callers flatten batch and time first.
    """
    targets = np.asarray(targets)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatchError(f"cross_entropy: {logits.shape} logits vs {targets.shape} targets")
    if targets.min() < 0 or targets.max() >= vocab:
        bad = targets[(targets < 0) | (targets >= vocab)][0]
        raise IndexError(f"target id {bad} outside [0, {vocab})")
    keep = targets != pad_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DataError("no non-pad targets")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(n), targets]
    loss = -(picked * keep).sum() / np.float32(n_keep)
    out = Tensor(np.float32(loss))

    def backward_fn(g):
        probs = np.exp(logp)
        probs[np.arange(n), targets] -= 1.0
        probs *= (keep / np.float32(n_keep))[:, None]
        return (probs * g,)

    return record(out, [logits], backward_fn, "cross_entropy")
