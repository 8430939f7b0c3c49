"""Tape-based reverse-mode automatic differentiation over numpy arrays.

The tape is define-by-run: every primitive is evaluated eagerly when it is
recorded and appended to a flat node list, so the list is always in
topological order.  ``backward`` walks it once in reverse.

All values are float64.  ReLU uses subgradient 0 at the kink.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "backward",
    "AdamState",
    "adam_step",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable  # (g, input_values, out_value, attrs, needs) -> tuple of grads
    check: Callable | None = None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_matmul(name, a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"{name}: expects 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"{name}: inner dimensions differ, {a.shape} @ {b.shape}")


def _check_cross(name, a, b):
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"{name}: needs 3-vectors, got {a.shape} and {b.shape}")
    _check_broadcast(name, a, b)


def _check_unary3(name, a):
    if a.shape != (3,):
        raise ShapeError(f"{name}: needs a single 3-vector, got {a.shape}")


def _check_scalar(name, a):
    if a.size != 1:
        raise ShapeError(f"{name}: scalar primitive got shape {a.shape}")


def _check_concat(name, *xs):
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1 or any(x.ndim == 0 for x in xs):
        raise ShapeError(f"{name}: leading shapes differ: {[x.shape for x in xs]}")


# -- vector-Jacobian products ------------------------------------------------

def _vjp_add(g, xs, out, attrs, needs):
    a, b = xs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _vjp_sub(g, xs, out, attrs, needs):
    a, b = xs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _vjp_mul(g, xs, out, attrs, needs):
    a, b = xs
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _vjp_div(g, xs, out, attrs, needs):
    a, b = xs
    return (_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b, b.shape) if needs[1] else None)


def _vjp_matmul(g, xs, out, attrs, needs):
    a, b = xs
    ga = gb = None
    if needs[0]:
        if b.ndim == 1:
            ga = np.multiply.outer(g, b) if a.ndim == 2 else g * b
        else:
            ga = g @ b.T
    if needs[1]:
        if a.ndim == 1:
            gb = np.multiply.outer(a, g)
        elif b.ndim == 1:
            gb = a.T @ g
        else:
            gb = a.T @ g
    return ga, gb


def _vjp_relu(g, xs, out, attrs, needs):
    return (g * (xs[0] > 0),)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _vjp_softmax(g, xs, out, attrs, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax(x):
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _vjp_log_softmax(g, xs, out, attrs, needs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _sum(x, axis=None):
    return np.asarray(x.sum(axis=axis))


def _vjp_sum(g, xs, out, attrs, needs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean(x, axis=None):
    return np.asarray(x.mean(axis=axis))


def _vjp_mean(g, xs, out, attrs, needs):
    x = xs[0]
    axis = attrs.get("axis")
    n = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def _vjp_concat(g, xs, out, attrs, needs):
    grads, start = [], 0
    for x, need in zip(xs, needs):
        stop = start + x.shape[-1]
        grads.append(g[..., start:stop] if need else None)
        start = stop
    return tuple(grads)


def _vjp_cross(g, xs, out, attrs, needs):
    a, b = xs
    # d(a x b) . g  ->  grad_a = b x g, grad_b = g x a
    return (_unbroadcast(np.cross(b, g), a.shape) if needs[0] else None,
            _unbroadcast(np.cross(g, a), b.shape) if needs[1] else None)


def _normalize(v):
    n = np.sqrt(v @ v)
    if n == 0.0:
        raise FloatingPointError("normalize: zero-length vector")
    return v / n


def _vjp_normalize(g, xs, out, attrs, needs):
    n = np.sqrt(xs[0] @ xs[0])
    return ((g - out * (out @ g)) / n,)


def _vjp_reshape(g, xs, out, attrs, needs):
    return (g.reshape(xs[0].shape),)


def _vjp_take(g, xs, out, attrs, needs):
    gx = np.zeros_like(xs[0])
    np.add.at(gx, attrs["indices"], g)
    return (gx,)


def _vjp_slice(g, xs, out, attrs, needs):
    gx = np.zeros_like(xs[0])
    gx[attrs["key"]] = g
    return (gx,)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(np.add, _vjp_add, _check_broadcast),
    "subtract": Primitive(np.subtract, _vjp_sub, _check_broadcast),
    "multiply": Primitive(np.multiply, _vjp_mul, _check_broadcast),
    "divide": Primitive(np.divide, _vjp_div, _check_broadcast),
    "scale": Primitive(lambda x, c: x * c, lambda g, xs, o, at, n: (g * at["c"],)),
    "matmul": Primitive(np.matmul, _vjp_matmul, _check_matmul),
    "relu": Primitive(lambda x: np.maximum(x, 0.0), _vjp_relu),
    "softmax": Primitive(_softmax, _vjp_softmax),
    "log_softmax": Primitive(_log_softmax, _vjp_log_softmax),
    "log": Primitive(np.log, lambda g, xs, o, at, n: (g / xs[0],)),
    "sum": Primitive(_sum, _vjp_sum),
    "mean": Primitive(_mean, _vjp_mean),
    "concat": Primitive(lambda *xs: np.concatenate(xs, axis=-1), _vjp_concat, _check_concat),
    "cross": Primitive(np.cross, _vjp_cross, _check_cross),
    "normalize": Primitive(_normalize, _vjp_normalize, _check_unary3),
    "sin": Primitive(np.sin, lambda g, xs, o, at, n: (g * np.cos(xs[0]),), _check_scalar),
    "cos": Primitive(np.cos, lambda g, xs, o, at, n: (-g * np.sin(xs[0]),), _check_scalar),
    "sqrt": Primitive(np.sqrt, lambda g, xs, o, at, n: (g * 0.5 / o,), _check_scalar),
    "reshape": Primitive(lambda x, shape: x.reshape(shape), _vjp_reshape),
    "take": Primitive(lambda x, indices: x[indices], _vjp_take),
    "slice": Primitive(lambda x, key: x[key], _vjp_slice),
}

# attributes passed positionally after the array inputs
_ATTR_ARGS = {"scale": ("c",), "reshape": ("shape",), "take": ("indices",), "slice": ("key",)}
_KW_ARGS = {"sum": ("axis",), "mean": ("axis",)}


class Var:
    """Handle to a node on a tape.  Supports ``+ - * / @`` and a few methods."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("subtract", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("subtract", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", [self], c=float(other))
        return self.tape.record("multiply", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", [self], c=1.0 / float(other))
        return self.tape.record("divide", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("divide", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self._lift(other), self])

    def __getitem__(self, key):
        return self.tape.record("slice", [self], key=key)

    def sum(self, axis=None):
        return self.tape.record("sum", [self], axis=axis)

    def mean(self, axis=None):
        return self.tape.record("mean", [self], axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.record("reshape", [self], shape=tuple(shape))

    def take(self, indices):
        return self.tape.record("take", [self], indices=np.asarray(indices))

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={node.value.shape})"


class Tape:
    """Flat, append-only record of primitive evaluations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def variable(self, value, requires_grad: bool = True) -> Var:
        """Register a leaf.  Leaves with ``requires_grad`` receive gradients."""
        arr = np.array(value, dtype=np.float64)
        return self._append(Node("leaf", (), arr, requires_grad))

    def constant(self, value) -> Var:
        return self.variable(value, requires_grad=False)

    def record(self, op: str, inputs, **attrs) -> Var:
        if op not in PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        prim = PRIMITIVES[op]
        ids = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ValueError(f"{op}: input belongs to a different tape")
                ids.append(x.id)
            elif isinstance(x, int) and 0 <= x < len(self.nodes):
                ids.append(x)
            else:
                raise ValueError(f"{op}: input {x!r} is not a node on this tape")
        vals = [self.nodes[i].value for i in ids]
        if prim.check is not None:
            prim.check(op, *vals)
        args = [attrs[k] for k in _ATTR_ARGS.get(op, ())]
        kwargs = {k: attrs[k] for k in _KW_ARGS.get(op, ()) if k in attrs}
        try:
            out = np.asarray(prim.forward(*vals, *args, **kwargs), dtype=np.float64)
        except ValueError as exc:
            shapes = ", ".join(str(v.shape) for v in vals)
            raise ShapeError(f"{op}: {exc} (input shapes {shapes})") from exc
        req = any(self.nodes[i].requires_grad for i in ids)
        return self._append(Node(op, tuple(ids), out, req, attrs))

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.requires_grad]

    def backward(self, root) -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. every trainable leaf.

        Leaves that ``root`` does not depend on get zero arrays.
        """
        rid = root.id if isinstance(root, Var) else int(root)
        rval = self.nodes[rid].value
        if rval.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {rval.shape}")
        adj: dict[int, np.ndarray] = {rid: np.ones_like(rval)}
        for nid in range(rid, -1, -1):
            g = adj.get(nid)
            node = self.nodes[nid]
            if g is None or node.op == "leaf" or not node.requires_grad:
                continue
            needs = tuple(self.nodes[i].requires_grad for i in node.inputs)
            vals = [self.nodes[i].value for i in node.inputs]
            grads = PRIMITIVES[node.op].vjp(g, vals, node.value, node.attrs, needs)
            for i, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = gi
            if nid != rid:
                del adj[nid]  # free intermediate adjoints as we go
        return {i: adj.get(i, np.zeros_like(self.nodes[i].value)) for i in self.leaves()}


def backward(tape: Tape, root) -> dict[int, np.ndarray]:
    return tape.backward(root)


# functional helpers so model code reads like numpy

def relu(x: Var) -> Var:
    return x.tape.record("relu", [x])


def softmax(x: Var) -> Var:
    return x.tape.record("softmax", [x])


def log_softmax(x: Var) -> Var:
    return x.tape.record("log_softmax", [x])


def log(x: Var) -> Var:
    return x.tape.record("log", [x])


def sin(x: Var) -> Var:
    return x.tape.record("sin", [x])


def cos(x: Var) -> Var:
    return x.tape.record("cos", [x])


def sqrt(x: Var) -> Var:
    return x.tape.record("sqrt", [x])


def cross(a: Var, b) -> Var:
    return a.tape.record("cross", [a, a._lift(b)])


def normalize(v: Var) -> Var:
    return v.tape.record("normalize", [v])


def concat(xs) -> Var:
    xs = list(xs)
    return xs[0].tape.record("concat", xs)


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for a named group of parameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place.

    Every key in ``grads`` must name a parameter; parameters without a
    gradient entry are left alone.  Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
