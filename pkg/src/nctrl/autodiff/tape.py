"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation applied to its nodes in execution
order, so the record list is already topologically sorted. Calling
:meth:`Tape.backward` walks it once in reverse and returns a gradient for
every trainable leaf.

Tapes are cheap and meant to be rebuilt for every minibatch; parameters live
outside the tape as plain ``dict[str, np.ndarray]`` and are lifted onto a
fresh tape with :meth:`Tape.params`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Node:
    """A value living on a tape."""

    __slots__ = ("tape", "value", "idx", "requires_grad", "trainable")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, value: np.ndarray, idx: int,
                 requires_grad: bool, trainable: bool = False):
        self.tape = tape
        self.value = value
        self.idx = idx
        self.requires_grad = requires_grad
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, shape={self.shape})"

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of ops; one backward pass per scalar output.

    With ``grad=False`` nothing is recorded, which makes the same model code
    usable for cheap evaluation.
    """

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.size = 0
        # per node id: whether a gradient flows into it
        self._requires: list[bool] = []
        # trainable leaf id -> shape
        self._leaves: dict[int, tuple] = {}
        # (op name, input ids, output id, backward fn); closures capture
        # arrays only, never nodes, so a dropped tape is freed by refcounting
        self.records: list[tuple[str, tuple[int, ...], int, BackwardFn]] = []
        self._consumed = False

    def _new(self, value, requires_grad: bool, trainable: bool = False) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, value, self.size, requires_grad, trainable)
        self.size += 1
        self._requires.append(requires_grad)
        if trainable:
            self._leaves[node.idx] = value.shape
        return node

    def param(self, value) -> Node:
        """Register a trainable leaf (the array is copied)."""
        return self._new(np.array(value, dtype=np.float64), self.grad_enabled, True)

    def const(self, value) -> Node:
        return self._new(value, False)

    def params(self, arrays: dict[str, np.ndarray]) -> dict[str, Node]:
        return {name: self.param(arr) for name, arr in arrays.items()}

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def record(self, op: str, inputs: Sequence[Node], value, backward: BackwardFn) -> Node:
        needs = self.grad_enabled and any(n.requires_grad for n in inputs)
        out = self._new(value, needs)
        if needs:
            self.records.append((op, tuple(n.idx for n in inputs), out.idx, backward))
        return out

    def backward(self, output: Node) -> dict[int, np.ndarray]:
        """Gradients of ``output`` keyed by node id for every trainable leaf.

        The op records are released afterwards: one backward pass per tape.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ShapeError("backward (scalar output required)", output.shape)
        if not self.grad_enabled:
            raise RuntimeError("tape was created with grad=False")
        if self._consumed:
            raise RuntimeError("tape records were already consumed by a backward pass")
        grads: list[np.ndarray | None] = [None] * self.size
        grads[output.idx] = np.ones_like(output.value)
        requires = self._requires
        for _, inputs, out_idx, fn in reversed(self.records):
            g = grads[out_idx]
            if g is None:
                continue
            grads[out_idx] = None
            for idx, gi in zip(inputs, fn(g)):
                if gi is None or not requires[idx]:
                    continue
                grads[idx] = gi if grads[idx] is None else grads[idx] + gi
        self.records = []
        self._consumed = True
        return {idx: np.zeros(shape) if grads[idx] is None else grads[idx]
                for idx, shape in self._leaves.items()}

    def grads_by_name(self, output: Node, named: dict[str, Node]) -> dict[str, np.ndarray]:
        grads = self.backward(output)
        return {name: grads[node.idx] for name, node in named.items()}


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fwd, bwd):
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(op, a.shape, b.shape) from exc
    sa, sb = a.shape, b.shape
    x, y = a.value, b.value
    need = (a.requires_grad, b.requires_grad)

    def backward(g):
        ga, gb = bwd(g, x, y, value, need)
        return (_unbroadcast(ga, sa) if need[0] else None,
                _unbroadcast(gb, sb) if need[1] else None)

    return tape.record(op, (a, b), value, backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    return _binary("add", a, b, np.add, lambda g, x, y, z, need: (g, g))


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y, z, need: (g, -g if need[1] else None))


def mul(a, b) -> Node:
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y, z, need: (g * y if need[0] else None,
                                             g * x if need[1] else None))


def div(a, b) -> Node:
    return _binary("div", a, b, np.divide,
                   lambda g, x, y, z, need: (g / y if need[0] else None,
                                             -g * z / y if need[1] else None))


def neg(a: Node) -> Node:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def power(a: Node, exponent: float) -> Node:
    x = a.value
    value = x ** exponent
    return a.tape.record("power", (a,), value,
                         lambda g: (g * exponent * x ** (exponent - 1),))


def square(a: Node) -> Node:
    x = a.value
    return a.tape.record("square", (a,), x * x, lambda g: (2.0 * g * x,))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.tape.record("exp", (a,), value, lambda g: (g * value,))


def log(a: Node) -> Node:
    x = a.value
    return a.tape.record("log", (a,), np.log(x), lambda g: (g / x,))


def log_abs(a: Node) -> Node:
    x = a.value
    return a.tape.record("log_abs", (a,), np.log(np.abs(x)), lambda g: (g / x,))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    x = a.value
    mask = np.where(x > 0, 1.0, slope)
    return a.tape.record("leaky_relu", (a,), x * mask, lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return a.tape.record("tanh", (a,), value, lambda g: (g * (1.0 - value * value),))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp; the gradient is zero where the clamp is active."""
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return a.tape.record("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul (operands must be at least 2-D)", a.shape, b.shape)
    try:
        value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError("matmul", a.shape, b.shape) from exc
    x, y = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if need_b else None
        return ga, gb

    return tape.record("matmul", (a, b), value, backward)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    return a.tape.record("sum", (a,), value,
                         lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape
    count = a.value.size if axis is None else np.prod(
        [shape[i] for i in np.atleast_1d(axis)])
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    return a.tape.record("mean", (a,), value,
                         lambda g: (_expand(g, shape, axis, keepdims) / count,))


def logsumexp(a: Node, axis=None, keepdims: bool = False) -> Node:
    """Overflow-safe log-sum-exp."""
    x = a.value
    shift = np.max(x, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    s = np.log(np.sum(np.exp(x - shift), axis=axis, keepdims=True)) + shift
    value = s if keepdims else (s.reshape(()) if axis is None else np.squeeze(s, axis=axis))
    weights = np.exp(x - s)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return a.tape.record("logsumexp", (a,), value, backward)


def log_softmax(a: Node, axis: int = -1) -> Node:
    return a - logsumexp(a, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", old, tuple(shape)) from exc
    return a.tape.record("reshape", (a,), value, lambda g: (g.reshape(old),))


def swapaxes(a: Node, ax1: int, ax2: int) -> Node:
    value = np.swapaxes(a.value, ax1, ax2)
    return a.tape.record("swapaxes", (a,), value, lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Node, index) -> Node:
    shape = a.shape
    value = a.value[index]

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.record("getitem", (a,), value, backward)


def concat(xs: Sequence, axis: int = -1) -> Node:
    tape = _tape_of(*xs)
    nodes = [tape.lift(x) for x in xs]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *(n.shape for n in nodes)) from exc
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return tape.record("concat", nodes, value, backward)


def stack(xs: Sequence, axis: int = 0) -> Node:
    tape = _tape_of(*xs)
    nodes = [tape.lift(x) for x in xs]
    try:
        value = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", *(n.shape for n in nodes)) from exc

    count = len(nodes)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(count)]

    return tape.record("stack", nodes, value, backward)


def broadcast_to(a: Node, shape) -> Node:
    old = a.shape
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError("broadcast_to", old, tuple(shape)) from exc
    return a.tape.record("broadcast_to", (a,), value, lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# densities

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_density(x, mean_, log_var) -> Node:
    """Diagonal Gaussian log-density, summed over the last axis."""
    tape = _tape_of(x, mean_, log_var)
    x, mean_, log_var = tape.lift(x), tape.lift(mean_), tape.lift(log_var)
    diff = x - mean_
    per_dim = -0.5 * LOG_2PI - 0.5 * log_var - 0.5 * square(diff) * exp(-log_var)
    return sum_(per_dim, axis=-1)
