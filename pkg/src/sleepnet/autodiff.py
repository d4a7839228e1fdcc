"""Reverse-mode autodiff over dense float64 numpy tensors.

Just the primitives the quality network, its losses, the recommenders and
the saliency analyses need. Every op returns a ``Node`` holding its value
and an adjoint: a function from the output gradient to one gradient per
parent. ``backward`` walks the graph in reverse topological order and
accumulates into ``Node.grad``.

Graphs are rebuilt on every forward pass; nothing is cached between
calls, so two backward passes over the same graph give identical
gradients (grads are reset first).

Second derivatives are not supported by this engine. Callers who need a
Hessian take central differences of first-order gradients instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from sleepnet_core.errors import SleepnetError
from sleepnet_core.protocol import ADAM_BETA1, ADAM_BETA2, ADAM_EPS

Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class AutodiffError(SleepnetError):
    """Graph construction or differentiation failed."""


class ShapeMismatch(AutodiffError, ValueError):
    pass


class NonScalarOutput(AutodiffError, ValueError):
    pass


class KeyMismatch(AutodiffError, KeyError):
    pass


class Node:
    """A value in the graph. Leaves have no parents and no adjoint."""

    __slots__ = ("value", "op", "parents", "grad", "_adjoint")

    def __init__(self, value, op: str = "leaf", parents: tuple["Node", ...] = (),
                 adjoint: Optional[Adjoint] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.grad: Optional[np.ndarray] = None
        self._adjoint = adjoint

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return subtract(self, other)
    def __rsub__(self, other): return subtract(other, self)
    def __mul__(self, other): return multiply(self, other)
    def __rmul__(self, other): return multiply(other, self)
    def __neg__(self): return multiply(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ── Primitives ───────────────────────────────────────────────────────────

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    return Node(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "subtract")
    return Node(a.value - b.value, "subtract", (a, b),
                lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "multiply")
    return Node(a.value * b.value, "multiply", (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return Node(a.value @ b.value, "matmul", (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return Node(value, "concat", nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Node:
    """Basic indexing (ints, slices, tuples of them)."""
    a = as_node(a)

    def adjoint(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], "slice", (a,), adjoint)


def sum_(a, axis: Optional[int] = None) -> Node:
    a = as_node(a)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(a.value.sum(axis=axis), "sum", (a,), adjoint)


def mean(a, axis: Optional[int] = None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return multiply(sum_(a, axis), 1.0 / count)


def square(a) -> Node:
    a = as_node(a)
    return Node(a.value ** 2, "square", (a,), lambda g: (2.0 * a.value * g,))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return Node(t, "tanh", (a,), lambda g: (g * (1.0 - t ** 2),))


def sigmoid(a) -> Node:
    a = as_node(a)
    s = expit(a.value)
    return Node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def elu(a) -> Node:
    a = as_node(a)
    neg = np.expm1(np.minimum(a.value, 0.0))
    value = np.where(a.value > 0, a.value, neg)
    return Node(value, "elu", (a,), lambda g: (g * np.where(a.value > 0, 1.0, neg + 1.0),))


def softplus(a) -> Node:
    a = as_node(a)
    value = np.logaddexp(0.0, a.value)
    return Node(value, "softplus", (a,), lambda g: (g * expit(a.value),))


def cumsum(a, axis: int = -1) -> Node:
    a = as_node(a)
    return Node(np.cumsum(a.value, axis=axis), "cumsum", (a,),
                lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from None
    return Node(value, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# ── LSTM ─────────────────────────────────────────────────────────────────

def lstm_cell(x, h, c, W, U, b) -> Node:
    """One LSTM step, fused. Returns (B, 2H): new hidden then new cell state.

    Gate blocks along the 4H axis: input, forget, candidate, output.
    ``x`` (B, F), ``h``/``c`` (B, H), ``W`` (F, 4H), ``U`` (H, 4H), ``b`` (4H,).
    """
    x, h, c, W, U, b = (as_node(n) for n in (x, h, c, W, U, b))
    H = h.shape[-1]
    if (x.value.ndim != 2 or W.shape != (x.shape[1], 4 * H) or U.shape != (H, 4 * H)
            or b.shape != (4 * H,) or c.shape != h.shape or h.shape[0] != x.shape[0]):
        raise ShapeMismatch(
            f"lstm_cell: x{x.shape} h{h.shape} c{c.shape} W{W.shape} U{U.shape} b{b.shape}"
        )
    z = x.value @ W.value + h.value @ U.value + b.value
    i = expit(z[:, :H])
    f = expit(z[:, H:2 * H])
    gc = np.tanh(z[:, 2 * H:3 * H])
    o = expit(z[:, 3 * H:])
    c_new = f * c.value + i * gc
    tc = np.tanh(c_new)
    h_new = o * tc

    def adjoint(g):
        dh, dc_out = g[:, :H], g[:, H:]
        dc = dc_out + dh * o * (1.0 - tc ** 2)
        dz = np.concatenate([
            dc * gc * i * (1.0 - i),
            dc * c.value * f * (1.0 - f),
            dc * i * (1.0 - gc ** 2),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        return (dz @ W.value.T, dz @ U.value.T, dc * f,
                x.value.T @ dz, h.value.T @ dz, dz.sum(axis=0))

    return Node(np.concatenate([h_new, c_new], axis=1), "lstm_cell", (x, h, c, W, U, b), adjoint)


def lstm_cell_unfused(x, h, c, W, U, b) -> Node:
    """``lstm_cell`` composed from the elementary primitives (reference path)."""
    H = as_node(h).shape[-1]
    z = add(add(matmul(x, W), matmul(h, U)), b)
    i = sigmoid(slice_(z, (slice(None), slice(0, H))))
    f = sigmoid(slice_(z, (slice(None), slice(H, 2 * H))))
    g = tanh(slice_(z, (slice(None), slice(2 * H, 3 * H))))
    o = sigmoid(slice_(z, (slice(None), slice(3 * H, 4 * H))))
    c_new = add(multiply(f, c), multiply(i, g))
    return concat([multiply(o, tanh(c_new)), c_new], axis=1)


# ── Backward ─────────────────────────────────────────────────────────────

def _topological(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar output."""
    if output.value.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    order = _topological(output)
    for node in order:
        node.grad = np.zeros_like(node.value)
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node._adjoint is None:
            continue
        for parent, g in zip(node.parents, node._adjoint(node.grad)):
            if g is not None:
                parent.grad = parent.grad + g


# ── Gradient checking ────────────────────────────────────────────────────

@dataclass(frozen=True)
class GradientEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass(frozen=True)
class GradientReport:
    entries: tuple[GradientEntry, ...]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def failures(self) -> tuple[GradientEntry, ...]:
        return tuple(e for e in self.entries if e.rel_error > self.tolerance)

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(build: Callable[[Mapping[str, Node]], Node],
                    inputs: Mapping[str, np.ndarray], tolerance: float = 1e-4,
                    step: float = 1e-4, names: Optional[Iterable[str]] = None) -> GradientReport:
    """Compare autodiff gradients with central finite differences.

    ``build`` maps named leaf nodes to a scalar node and must be
    deterministic. Only inputs listed in ``names`` (default all) are
    perturbed, every coordinate of each.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: Node(v) for k, v in values.items()}
    out = build(leaves)
    backward(out)

    def evaluate(name: str, idx: tuple[int, ...], delta: float) -> float:
        shifted = {k: v.copy() for k, v in values.items()}
        shifted[name][idx] += delta
        return build({k: Node(v) for k, v in shifted.items()}).item()

    entries = []
    for name in (names or values):
        grad = leaves[name].grad
        for idx in np.ndindex(*values[name].shape):
            numeric = (evaluate(name, idx, step) - evaluate(name, idx, -step)) / (2.0 * step)
            analytic = float(grad[idx])
            entries.append(GradientEntry(name, idx, analytic, numeric,
                                         relative_error(analytic, numeric)))
    return GradientReport(tuple(entries), tolerance)


# ── Parameters and Adam ──────────────────────────────────────────────────

@dataclass
class ParamStore:
    """Named parameter tensors plus Adam moments."""
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        self.params = {k: np.asarray(p, dtype=np.float64) for k, p in self.params.items()}
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.params))

    def leaves(self) -> dict[str, Node]:
        """Fresh leaf nodes for one forward pass."""
        return {k: Node(p) for k, p in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: p.copy() for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns the store."""
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise KeyMismatch(f"gradient keys differ from parameters (missing {missing}, extra {extra})")
    checked = {}
    for name in store.names():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store.params[name].shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, "
                                f"parameter {store.params[name].shape}")
        checked[name] = g
    # all shapes verified: from here the update is all-or-nothing
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, g in checked.items():
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store.params[name] = store.params[name] - lr * (store.m[name] / c1) / (
            np.sqrt(store.v[name] / c2) + eps)
    return store
