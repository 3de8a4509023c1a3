"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tracked :class:`Var` objects
in creation order.  Gradients are obtained by walking the tape backwards.  The
vector-Jacobian products are themselves written with the same operations, so
``grad(..., create_graph=True)`` yields gradients that can be differentiated
again (used by the second-order meta update and by IRM penalty checks).

Example
-------
>>> tape = Tape()
>>> x = tape.parameter("x", 3.0)
>>> loss = x * x
>>> float(tape.backward(loss)["x"])
6.0
"""
from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var", "Node", "Tape", "GradientMap", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "exp", "log", "sigmoid", "relu", "square", "sum", "mean",
    "broadcast_to", "sum_to", "reshape", "logsumexp", "log_softmax",
    "softmax", "softmax_cross_entropy",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(frozen=True)
class Node:
    """One recorded operation: kind, input node ids and its VJP closure."""

    kind: str
    inputs: tuple[int, ...]
    vjp: Callable[["Var"], tuple["Var | None", ...]]


class GradientMap(dict):
    """Mapping ``parameter name -> gradient array`` (same shape as the parameter)."""

    def norm(self) -> float:
        return float(np.sqrt(builtins.sum(float(np.sum(g * g)) for g in self.values())))


class Var:
    """A value living on a tape.  ``index is None`` marks an untracked constant."""

    __slots__ = ("value", "tape", "index", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape", index: int | None = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.index is not None

    @property
    def T(self) -> "Var":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f"#{self.index}" if self.tracked else "const"
        return f"Var({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of operations plus the named trainable leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Var] = {}
        self.recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, value, kind: str, name: str | None) -> Var:
        var = Var(_as_array(value), self, len(self.nodes), name)
        self.nodes.append(Node(kind, (), _no_inputs))
        return var

    def parameter(self, name: str, value) -> Var:
        if name in self.parameters:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        var = self._leaf(np.array(value, dtype=DTYPE), "param", name)
        self.parameters[name] = var
        return var

    def parameters_from(self, params: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Var]:
        """Register a dict of arrays; names not in ``names`` become constants."""
        keep = set(params) if names is None else set(names)
        return {k: (self.parameter(k, v) if k in keep else self.constant(v)) for k, v in params.items()}

    def input(self, value, name: str | None = None) -> Var:
        """A tracked leaf that is not a trainable parameter (for input gradients)."""
        return self._leaf(np.array(value, dtype=DTYPE), "input", name)

    def constant(self, value) -> Var:
        return Var(_as_array(value), self, None)

    def record(self, kind: str, value: np.ndarray, inputs: Sequence[Var], vjp) -> Var:
        ids = tuple(v.index for v in inputs if v.tracked)
        if not ids or not self.recording:
            return Var(value, self, None)
        out = Var(value, self, len(self.nodes))
        self.nodes.append(Node(kind, tuple(v.index if v.tracked else -1 for v in inputs), vjp))
        return out

    # -- reverse pass -------------------------------------------------
    def grad(self, loss: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
        """Gradients of scalar ``loss`` w.r.t. each var in ``wrt``.

        Vars not on a path to ``loss`` receive an exact zero gradient.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        grads: dict[int, Var] = {}
        if loss.tracked:
            grads[loss.index] = self.constant(np.ones_like(loss.value))
        was_recording = self.recording
        self.recording = create_graph
        keep = {w.index for w in wrt if w.tracked}
        try:
            top = loss.index if loss.tracked else -1
            for idx in range(top, -1, -1):
                g = grads.get(idx)
                if g is None:
                    continue
                node = self.nodes[idx]
                if not node.inputs:
                    continue
                contribs = node.vjp(g)
                for src, c in zip(node.inputs, contribs):
                    if src < 0 or c is None:
                        continue
                    prev = grads.get(src)
                    grads[src] = c if prev is None else add(prev, c)
                # interior gradients are no longer needed once propagated
                if idx not in keep:
                    del grads[idx]
        finally:
            self.recording = was_recording
        out = []
        for w in wrt:
            g = grads.get(w.index) if w.tracked else None
            if g is None:
                g = self.constant(np.zeros_like(w.value))
            elif not create_graph:
                g = self.constant(g.value)
            out.append(g)
        return out

    def backward(self, loss: Var) -> GradientMap:
        """Gradients for every registered parameter, as plain arrays."""
        names = list(self.parameters)
        grads = self.grad(loss, [self.parameters[n] for n in names])
        return GradientMap((n, g.value.copy()) for n, g in zip(names, grads))


def backward(tape: Tape, loss: Var) -> GradientMap:
    return tape.backward(loss)


def _no_inputs(g):
    return ()


def _as_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray) and value.dtype == DTYPE:
        return value
    return np.asarray(value, dtype=DTYPE)


def _lift(*args) -> tuple[Var, ...]:
    tape = next((a.tape for a in args if isinstance(a, Var)), None)
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    out = []
    for a in args:
        if isinstance(a, Var):
            if a.tape is not tape:
                raise ValueError("operands live on different tapes")
            out.append(a)
        else:
            out.append(tape.constant(a))
    return tuple(out)


def _broadcast_shape(a: Var, b: Var, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- shape plumbing -----------------------------------------------------

def sum_to(a, shape: tuple[int, ...]) -> Var:
    """Sum-reduce ``a`` down to ``shape`` (inverse of broadcasting)."""
    (a,) = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1)
    val = a.value.sum(axis=axes, keepdims=True)
    if lead:
        val = val.reshape(val.shape[lead:])
    src_shape = a.shape
    return a.tape.record("sum_to", val, (a,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(a, shape: tuple[int, ...]) -> Var:
    (a,) = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src_shape = a.shape
    val = np.broadcast_to(a.value, shape).copy()
    return a.tape.record("broadcast_to", val, (a,), lambda g: (sum_to(g, src_shape),))


def reshape(a, shape: tuple[int, ...]) -> Var:
    (a,) = _lift(a)
    src_shape = a.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (reshape(g, src_shape),))


def transpose(a) -> Var:
    (a,) = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d operand, got shape {a.shape}")
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> Var:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Var:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", a.value - b.value, (a, b), lambda g: (sum_to(g, sa), neg(sum_to(g, sb))))


def mul(a, b) -> Var:
    """Elementwise product with broadcasting."""
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return a.tape.record("mul", a.value * b.value, (a, b),
                         lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b) -> Var:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    out_val = a.value / b.value

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), neg(sum_to(mul(ga, div(a, b)), sb))

    return a.tape.record("div", out_val, (a, b), vjp)


def neg(a) -> Var:
    (a,) = _lift(a)
    return a.tape.record("neg", -a.value, (a,), lambda g: (neg(g),))


def scale(a, c: float) -> Var:
    """Multiply by a Python scalar."""
    (a,) = _lift(a)
    c = float(c)
    return a.tape.record("scale", a.value * c, (a,), lambda g: (scale(g, c),))


def square(a) -> Var:
    (a,) = _lift(a)
    return a.tape.record("square", a.value * a.value, (a,), lambda g: (mul(g, scale(a, 2.0)),))


def matmul(a, b) -> Var:
    a, b = _lift(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a.tape.record("matmul", a.value @ b.value, (a, b),
                         lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# -- elementwise nonlinearities ------------------------------------------

def exp(a) -> Var:
    (a,) = _lift(a)
    val = np.exp(a.value)
    out = a.tape.record("exp", val, (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Var:
    (a,) = _lift(a)
    return a.tape.record("log", np.log(a.value), (a,), lambda g: (div(g, a),))


def sigmoid(a) -> Var:
    (a,) = _lift(a)
    x = a.value
    # split by sign so neither branch overflows
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = a.tape.record("sigmoid", val, (a,), lambda g: (mul(g, mul(out, sub(1.0, out))),))
    return out


def relu(a) -> Var:
    (a,) = _lift(a)
    mask = (a.value > 0).astype(DTYPE)
    return a.tape.record("relu", a.value * mask, (a,), lambda g: (mul(g, mask),))


# -- reductions ----------------------------------------------------------

def sum(a, axis: int | None = None, keepdims: bool = False) -> Var:  # noqa: A001
    (a,) = _lift(a)
    src_shape = a.shape
    val = a.value.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * a.ndim
    else:
        kept = tuple(1 if i == axis % a.ndim else n for i, n in enumerate(src_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return a.tape.record("sum", np.asarray(val, dtype=DTYPE), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Var:
    (a,) = _lift(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Var:
    """Stable log-sum-exp along ``axis``; keeps the reduced axis."""
    (a,) = _lift(a)
    m = a.value.max(axis=axis, keepdims=True)
    val = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    src_shape = a.shape

    def vjp(g):
        return (mul(broadcast_to(g, src_shape), exp(sub(a, out))),)

    out = a.tape.record("logsumexp", val, (a,), vjp)
    return out


def log_softmax(a, axis: int = -1) -> Var:
    return sub(a, logsumexp(a, axis=axis))


def softmax(a, axis: int = -1) -> Var:
    return exp(log_softmax(a, axis=axis))


def softmax_cross_entropy(logits, target, reduction: str = "mean", atol: float = 1e-9) -> Var:
    """Cross-entropy between ``softmax(logits)`` and integer or probability targets.

    ``logits`` is ``(C,)`` or ``(N, C)``.  ``target`` is an int (array) of class
    indices or a probability array of the same shape as ``logits``.
    """
    (logits,) = _lift(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = reshape(logits, (1, logits.shape[0]))
    n, c = logits.shape
    if c < 2:
        raise ShapeError(f"cross-entropy needs at least 2 classes, got {c}")
    probs = _target_matrix(target, n, c, atol)
    nll = neg(sum(mul(log_softmax(logits, axis=1), probs), axis=1))
    if reduction == "none":
        return reshape(nll, ()) if squeeze else nll
    if reduction == "sum":
        return sum(nll)
    if reduction == "mean":
        return mean(nll)
    raise ValueError(f"unknown reduction {reduction!r}")


def _target_matrix(target, n: int, c: int, atol: float) -> np.ndarray:
    t = target.value if isinstance(target, Var) else np.asarray(target)
    if np.issubdtype(t.dtype, np.integer):
        labels = t.reshape(-1)
        if labels.shape[0] != n:
            raise ShapeError(f"got {labels.shape[0]} labels for {n} rows of logits")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        probs = np.zeros((n, c), dtype=DTYPE)
        probs[np.arange(n), labels] = 1.0
        return probs
    probs = np.asarray(t, dtype=DTYPE).reshape(n, c) if t.size == n * c else None
    if probs is None:
        raise ShapeError(f"soft target shape {t.shape} does not match logits ({n}, {c})")
    if np.any(probs < -atol) or np.any(np.abs(probs.sum(axis=1) - 1.0) > atol):
        raise ValueError("soft targets must be non-negative and sum to 1 per row")
    return probs
