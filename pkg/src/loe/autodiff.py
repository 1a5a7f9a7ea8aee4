"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is a Wengert list: every operation appends a node whose
inputs are earlier node ids, so the list is acyclic by construction. Values
are computed eagerly when all inputs are known, which makes the graph usable
define-by-run style; :meth:`Graph.forward` replays the whole list with new
leaf values (used by the finite-difference checker).

    g = Graph()
    x = g.leaf("x", np.array([3.0]))
    y = (x * x).sum()
    g.backward(y)["x"]   # -> array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ConfigurationError, StateError

DTYPE = np.float64
# floor used by guarded division / log / normalisation call sites
EPS = 1e-12


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    name: str | None = None
    requires_grad: bool = False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fwd_getitem(x, attrs):
    return x[attrs["index"]]


def _bwd_getitem(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    np.add.at(full, attrs["index"], g)
    return [full]


def _fwd_sum(x, attrs):
    return np.sum(x, axis=attrs["axis"], keepdims=attrs["keepdims"])


def _bwd_sum(g, vals, out, attrs):
    x = vals[0]
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _bwd_matmul(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if a.ndim == 1:
        ga = (g[..., None, :] @ np.swapaxes(b, -1, -2))[..., 0, :]
        gb = a[:, None] * g[..., None, :]
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]
    if b.ndim == 1:
        ga = g[..., :, None] * b
        gb = np.swapaxes(a, -1, -2) @ g[..., :, None]
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb[..., 0], b.shape)]
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _bwd_transpose(g, vals, out, attrs):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _bwd_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, sizes, axis=axis))


# op -> (forward(*values, attrs), backward(grad, values, out, attrs) -> per-input grads)
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b, at: a + b,
            lambda g, v, o, at: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]),
    "sub": (lambda a, b, at: a - b,
            lambda g, v, o, at: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]),
    "mul": (lambda a, b, at: a * b,
            lambda g, v, o, at: [_unbroadcast(g * v[1], v[0].shape),
                                 _unbroadcast(g * v[0], v[1].shape)]),
    "div": (lambda a, b, at: a / b,
            lambda g, v, o, at: [_unbroadcast(g / v[1], v[0].shape),
                                 _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape)]),
    "neg": (lambda a, at: -a, lambda g, v, o, at: [-g]),
    "square": (lambda a, at: a * a, lambda g, v, o, at: [2.0 * v[0] * g]),
    "exp": (lambda a, at: np.exp(a), lambda g, v, o, at: [g * o]),
    "log": (lambda a, at: np.log(a), lambda g, v, o, at: [g / v[0]]),
    "sqrt": (lambda a, at: np.sqrt(a), lambda g, v, o, at: [g * 0.5 / o]),
    "relu": (lambda a, at: np.maximum(a, 0.0), lambda g, v, o, at: [g * (v[0] > 0)]),
    # zero gradient outside [lo, hi], like torch.clamp
    "clip": (lambda a, at: np.clip(a, at["lo"], at["hi"]),
             lambda g, v, o, at: [g * ((v[0] >= at["lo"]) & (v[0] <= at["hi"]))]),
    "sum": (_fwd_sum, _bwd_sum),
    "matmul": (lambda a, b, at: a @ b, _bwd_matmul),
    "transpose": (lambda a, at: np.transpose(a, at["axes"]), _bwd_transpose),
    "reshape": (lambda a, at: np.reshape(a, at["shape"]),
                lambda g, v, o, at: [np.reshape(g, v[0].shape)]),
    "getitem": (_fwd_getitem, _bwd_getitem),
    "concat": (lambda *a: np.concatenate(a[:-1], axis=a[-1]["axis"]), _bwd_concat),
}


class Var:
    """Handle to a node of a :class:`Graph`; supports arithmetic operators."""

    __slots__ = ("graph", "id")
    __array_priority__ = 100.0

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.id]

    @property
    def value(self) -> np.ndarray | None:
        return self.node.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise ConfigurationError("cannot combine variables from different graphs")
            return other
        return self.graph.const(other)

    def _bin(self, op, other, reverse=False):
        other = self._lift(other)
        a, b = (other, self) if reverse else (self, other)
        return self.graph.apply(op, a, b)

    def __add__(self, o): return self._bin("add", o)
    def __radd__(self, o): return self._bin("add", o, True)
    def __sub__(self, o): return self._bin("sub", o)
    def __rsub__(self, o): return self._bin("sub", o, True)
    def __mul__(self, o): return self._bin("mul", o)
    def __rmul__(self, o): return self._bin("mul", o, True)
    def __truediv__(self, o): return self._bin("div", o)
    def __rtruediv__(self, o): return self._bin("div", o, True)
    def __matmul__(self, o): return self._bin("matmul", o)
    def __rmatmul__(self, o): return self._bin("matmul", o, True)
    def __neg__(self): return self.graph.apply("neg", self)

    def __getitem__(self, index):
        return self.graph.apply("getitem", self, index=index)

    def square(self): return self.graph.apply("square", self)
    def exp(self): return self.graph.apply("exp", self)
    def log(self): return self.graph.apply("log", self)
    def sqrt(self): return self.graph.apply("sqrt", self)
    def relu(self): return self.graph.apply("relu", self)

    def clip(self, lo=-np.inf, hi=np.inf):
        return self.graph.apply("clip", self, lo=lo, hi=hi)

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.node.value.ndim)))
        return self.graph.apply("transpose", self, axes=tuple(axes))

    def reshape(self, *shape):
        return self.graph.apply("reshape", self, shape=tuple(shape))

    def __repr__(self):
        return f"Var(id={self.id}, op={self.node.op!r}, value={self.value!r})"


class Graph:
    """Append-only computation graph.

    Leaves are either named parameters (``leaf``) or anonymous constants
    (``const``). Gradients are only reported for named leaves with
    ``requires_grad=True``.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.grads: list[np.ndarray | None] | None = None
        self._stale = False

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        self.grads = None
        return Var(self, len(self.nodes) - 1)

    def leaf(self, name: str, value=None, shape=None, requires_grad: bool = True) -> Var:
        if name in self.leaves:
            raise ConfigurationError(f"duplicate leaf name {name!r}")
        if value is not None:
            value = np.array(value, dtype=DTYPE)
            shape = value.shape
        elif shape is None:
            raise ConfigurationError(f"leaf {name!r} needs a value or a shape")
        node = Node("leaf", (), {"shape": tuple(shape)}, value, name, requires_grad)
        var = self._push(node)
        self.leaves[name] = var.id
        if value is None:
            self._stale = True
        return var

    def const(self, value) -> Var:
        value = np.array(value, dtype=DTYPE)
        return self._push(Node("const", (), {"shape": value.shape}, value))

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        fwd, _ = OPS[op]
        ids = tuple(v.id for v in inputs)
        vals = [self.nodes[i].value for i in ids]
        value = None
        if all(v is not None for v in vals):
            value = fwd(*vals, attrs)
        return self._push(Node(op, ids, attrs, value))

    # ------------------------------------------------------------------
    def forward(self, leaf_values: dict[str, Any] | None = None, output: Var | None = None):
        """Replay every node, optionally substituting new leaf values."""
        leaf_values = leaf_values or {}
        unknown = set(leaf_values) - set(self.leaves)
        if unknown:
            raise ConfigurationError(f"unknown leaves: {sorted(unknown)}")
        for name, value in leaf_values.items():
            node = self.nodes[self.leaves[name]]
            value = np.array(value, dtype=DTYPE)
            if value.shape != node.attrs["shape"]:
                raise ConfigurationError(
                    f"leaf {name!r}: expected shape {node.attrs['shape']}, got {value.shape}")
            node.value = value
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                if node.value is None:
                    raise ConfigurationError(f"leaf {node.name!r} has no value")
                continue
            fwd, _ = OPS[node.op]
            node.value = fwd(*(self.nodes[i].value for i in node.inputs), node.attrs)
        self._stale = False
        self.grads = None
        out = output if output is not None else Var(self, len(self.nodes) - 1)
        return out.value

    def backward(self, output: Var | None = None) -> dict[str, np.ndarray]:
        """Accumulate d(output)/d(node) for every node; return leaf gradients.

        Non-scalar outputs are seeded with ones (i.e. the gradient of their sum).
        """
        out_id = output.id if output is not None else len(self.nodes) - 1
        if self._stale or self.nodes[out_id].value is None:
            raise StateError("backward() called before a completed forward pass")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[out_id] = np.ones_like(self.nodes[out_id].value)
        for i in range(out_id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.inputs:
                continue
            _, bwd = OPS[node.op]
            vals = [self.nodes[j].value for j in node.inputs]
            for j, gj in zip(node.inputs, bwd(g, vals, node.value, node.attrs)):
                grads[j] = gj if grads[j] is None else grads[j] + gj
        self.grads = grads
        result = {}
        for name, i in self.leaves.items():
            node = self.nodes[i]
            if node.requires_grad:
                result[name] = grads[i] if grads[i] is not None else np.zeros_like(node.value)
        return result

    def grad_of(self, var: Var) -> np.ndarray:
        if self.grads is None:
            raise StateError("no gradients available; call backward() first")
        g = self.grads[var.id]
        return g if g is not None else np.zeros_like(var.value)


def concat(vars: list[Var], axis: int = 0) -> Var:
    g = vars[0].graph
    return g.apply("concat", *vars, axis=axis)


def eval_forward(graph: Graph, leaf_values: dict[str, Any], output: Var | None = None):
    return graph.forward(leaf_values, output)


def eval_backward(graph: Graph, output: Var | None = None) -> dict[str, np.ndarray]:
    return graph.backward(output)


def grad_check(graph: Graph, leaf_values: dict[str, Any] | None = None,
               h: float = 1e-5, output: Var | None = None) -> float:
    """Max over leaf entries of |analytic - central difference| / max(1, |analytic|).

    The output is reduced with ``sum`` if it is not a scalar. Leaf values are
    restored before returning.
    """
    base = {name: np.array(graph.nodes[i].value if name not in (leaf_values or {})
                           else leaf_values[name], dtype=DTYPE)
            for name, i in graph.leaves.items()}

    def f(values):
        return float(np.sum(graph.forward(values, output)))

    f(base)
    analytic = graph.backward(output)
    worst = 0.0
    for name, grad in analytic.items():
        x = base[name]
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = f(base)
            x[idx] = orig - h
            fm = f(base)
            x[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(grad[idx] - numeric) / max(1.0, abs(grad[idx]))
            worst = max(worst, err)
    graph.forward(base, output)
    return worst
