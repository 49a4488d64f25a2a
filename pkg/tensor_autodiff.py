"""
Define-by-run reverse-mode autodiff over float64 numpy arrays.

A Graph records every op whose inputs include a graph node. Constants (plain
arrays, or Tensors without a node id) are evaluated eagerly and never enter a
graph, so the same network code runs both for training and for cheap acting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Inputs of an op (or of an optimizer step) do not conform."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached an op."""


class GraphError(ValueError):
    """Misuse of a Graph (foreign nodes, non-scalar roots)."""


class Parameter:
    """Trainable array. Identity (not value) is its key in gradient maps."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    __slots__ = ("data", "graph", "node_id", "finite")
    # numpy must hand mixed arithmetic back to the reflected operators
    __array_ufunc__ = None

    def __init__(self, data, graph: Optional["Graph"] = None, node_id: Optional[int] = None,
                 finite: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id
        # set once the values are known to be finite, so later ops skip the scan
        self.finite = finite

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return forward_op("add", (self, other))

    def __radd__(self, other):
        return forward_op("add", (other, self))

    def __sub__(self, other):
        return forward_op("sub", (self, other))

    def __rsub__(self, other):
        return forward_op("sub", (other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scalar-mul", (self,), factor=float(other))
        return forward_op("elementwise-mul", (self, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return forward_op("scalar-mul", (self,), factor=-1.0)

    def __matmul__(self, other):
        return forward_op("matmul", (self, other))

    def __repr__(self):
        where = "const" if self.node_id is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Parameter):
        return Tensor(value.data)
    return Tensor(value)


@dataclass
class Node:
    kind: str
    input_ids: Tuple[Optional[int], ...]
    input_data: Tuple[np.ndarray, ...]
    attrs: dict
    output: np.ndarray


class Graph:
    """Append-only op record for one minibatch. Inputs always precede outputs."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._leaf_ids: Dict[int, int] = {}
        self._leaf_params: Dict[int, Parameter] = {}

    def watch(self, param: Parameter) -> Tensor:
        """Leaf node for a parameter; the same parameter always maps to one node."""
        node_id = self._leaf_ids.get(id(param))
        if node_id is None:
            _require_finite("leaf", param.data)
            node_id = len(self.nodes)
            self.nodes.append(Node("leaf", (), (), {}, param.data))
            self._leaf_ids[id(param)] = node_id
            self._leaf_params[node_id] = param
        return Tensor(self.nodes[node_id].output, self, node_id, finite=True)

    def record(self, kind: str, inputs: Sequence[Tensor], attrs: dict, output: np.ndarray) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node(
            kind,
            tuple(t.node_id for t in inputs),
            tuple(t.data for t in inputs),
            attrs,
            output,
        ))
        return Tensor(output, self, node_id, finite=True)

    def watched(self) -> List[Parameter]:
        return [self._leaf_params[i] for i in sorted(self._leaf_params)]

    def relu_masks(self) -> List[np.ndarray]:
        """Activation patterns of every recorded relu, in op order."""
        return [node.input_data[0] > 0 for node in self.nodes if node.kind == "relu"]


# ----------------------------------------------------------------------------
# Forward rules
# ----------------------------------------------------------------------------

def _broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _fwd_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def _fwd_add(a, b):
    _broadcast("add", a, b)
    return a + b


def _fwd_sub(a, b):
    _broadcast("sub", a, b)
    return a - b


def _fwd_mul(a, b):
    _broadcast("elementwise-mul", a, b)
    return a * b


def _fwd_concat(*parts):
    if not parts:
        raise ShapeError("concat-last-axis: no inputs")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.ndim == 0 or p.shape[:-1] != lead:
            raise ShapeError(
                f"concat-last-axis: shapes {parts[0].shape} and {p.shape} do not conform")
    return np.concatenate(parts, axis=-1)


def _fwd_slice(a, start, stop):
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice-last-axis: [{start}:{stop}] out of range for shape {a.shape}")
    return a[..., start:stop].copy()


def _check_axis(kind, a, axis):
    if axis not in (None, -1):
        raise ShapeError(f"{kind}: unsupported axis {axis}")
    if axis == -1 and a.ndim == 0:
        raise ShapeError(f"{kind}: scalar input has no last axis")


def _fwd_sum(a, axis=None):
    _check_axis("sum", a, axis)
    return np.sum(a, axis=axis)


def _fwd_mean(a, axis=None):
    _check_axis("mean", a, axis)
    return np.mean(a, axis=axis)


def _fwd_l2(a):
    if a.ndim == 0:
        raise ShapeError("l2-norm-over-last-axis: scalar input")
    return np.sqrt(np.sum(a * a, axis=-1))


FORWARD_RULES: Dict[str, Callable[..., np.ndarray]] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "elementwise-mul": _fwd_mul,
    "scalar-mul": lambda a, factor: a * factor,
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "concat-last-axis": _fwd_concat,
    "slice-last-axis": _fwd_slice,
    "square": lambda a: a * a,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "abs": np.abs,
    "l2-norm-over-last-axis": _fwd_l2,
    "stop-gradient": lambda a: a.copy(),
}


# ----------------------------------------------------------------------------
# Backward rules: (upstream grad, node) -> one grad (or None) per input
# ----------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _bwd_matmul(g, node):
    a, b = node.input_data
    ga = g @ b.T
    gb = np.outer(a, g) if a.ndim == 1 else a.T @ g
    return ga, gb


def _bwd_add(g, node):
    a, b = node.input_data
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def _bwd_sub(g, node):
    a, b = node.input_data
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def _bwd_mul(g, node):
    a, b = node.input_data
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def _bwd_concat(g, node):
    grads, start = [], 0
    for part in node.input_data:
        width = part.shape[-1]
        grads.append(g[..., start:start + width])
        start += width
    return tuple(grads)


def _bwd_slice(g, node):
    (a,) = node.input_data
    full = np.zeros_like(a)
    full[..., node.attrs["start"]:node.attrs["stop"]] = g
    return (full,)


def _bwd_reduce(g, node, scale):
    (a,) = node.input_data
    if node.attrs.get("axis") is None:
        return (np.full(a.shape, float(g) * scale(a.size)),)
    return (np.broadcast_to(np.expand_dims(g, -1), a.shape) * scale(a.shape[-1]),)


def _bwd_l2(g, node):
    (a,) = node.input_data
    norm = np.expand_dims(node.output, -1)
    # zero vector: subgradient 0
    unit = np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)
    return (np.expand_dims(g, -1) * unit,)


def _bwd_tanh(g, node):
    return (g * (1.0 - node.output * node.output),)


BACKWARD_RULES: Dict[str, Callable[[np.ndarray, Node], tuple]] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "elementwise-mul": _bwd_mul,
    "scalar-mul": lambda g, node: (g * node.attrs["factor"],),
    "relu": lambda g, node: (g * (node.input_data[0] > 0),),
    "tanh": _bwd_tanh,
    "concat-last-axis": _bwd_concat,
    "slice-last-axis": _bwd_slice,
    "square": lambda g, node: (2.0 * node.input_data[0] * g,),
    "sum": lambda g, node: _bwd_reduce(g, node, lambda count: 1.0),
    "mean": lambda g, node: _bwd_reduce(g, node, lambda count: 1.0 / count),
    "abs": lambda g, node: (g * np.sign(node.input_data[0]),),
    "l2-norm-over-last-axis": _bwd_l2,
    "stop-gradient": lambda g, node: (None,),
}

OP_KINDS = frozenset(FORWARD_RULES)


def _common_graph(kind: str, inputs: Sequence[Tensor]) -> Optional[Graph]:
    graph = None
    for t in inputs:
        if t.node_id is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError(f"{kind}: inputs belong to different graphs")
    return graph


def _require_finite(kind: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind}: non-finite input of shape {np.shape(data)}")


def forward_op(kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Evaluate one op; record it when any input is a graph node."""
    rule = FORWARD_RULES.get(kind)
    if rule is None:
        raise ValueError(f"unknown op kind {kind!r}")
    inputs = tuple(as_tensor(x) for x in inputs)
    for t in inputs:
        if not t.finite:
            _require_finite(kind, t.data)
    output = np.asarray(rule(*(t.data for t in inputs), **attrs), dtype=np.float64)
    if not np.isfinite(output).all():
        raise NonFiniteError(f"{kind}: non-finite output of shape {output.shape}")
    graph = _common_graph(kind, inputs)
    if graph is None:
        return Tensor(output, finite=True)
    return graph.record(kind, inputs, attrs, output)


# Thin wrappers, named after the op kinds.

def matmul(a, b) -> Tensor:
    return forward_op("matmul", (a, b))


def add(a, b) -> Tensor:
    return forward_op("add", (a, b))


def sub(a, b) -> Tensor:
    return forward_op("sub", (a, b))


def mul(a, b) -> Tensor:
    return forward_op("elementwise-mul", (a, b))


def scale(a, factor: float) -> Tensor:
    return forward_op("scalar-mul", (a,), factor=float(factor))


def relu(a) -> Tensor:
    return forward_op("relu", (a,))


def tanh(a) -> Tensor:
    return forward_op("tanh", (a,))


def concat(parts: Sequence) -> Tensor:
    return forward_op("concat-last-axis", tuple(parts))


def slice_last(a, start: int, stop: int) -> Tensor:
    return forward_op("slice-last-axis", (a,), start=int(start), stop=int(stop))


def square(a) -> Tensor:
    return forward_op("square", (a,))


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    return forward_op("sum", (a,), axis=axis)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    return forward_op("mean", (a,), axis=axis)


def absolute(a) -> Tensor:
    return forward_op("abs", (a,))


def l2_norm(a) -> Tensor:
    return forward_op("l2-norm-over-last-axis", (a,))


def stop_gradient(a) -> Tensor:
    return forward_op("stop-gradient", (a,))


GradientMap = Dict[Parameter, np.ndarray]


def backward(graph: Graph, root: Tensor, params: Optional[Iterable[Parameter]] = None) -> GradientMap:
    """d(root)/d(parameter) for every watched parameter plus any listed in `params`."""
    if root.graph is not graph or root.node_id is None:
        raise GraphError("backward root is not a node of this graph")
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node_id in range(root.node_id, -1, -1):
        g = grads.get(node_id)
        node = graph.nodes[node_id]
        if g is None or node.kind == "leaf":
            continue
        for input_id, input_grad in zip(node.input_ids, BACKWARD_RULES[node.kind](g, node)):
            if input_id is None or input_grad is None:
                continue
            prev = grads.get(input_id)
            grads[input_id] = input_grad if prev is None else prev + input_grad
    graph.grads = grads

    result: GradientMap = {}
    for node_id, param in graph._leaf_params.items():
        g = grads.get(node_id)
        result[param] = np.zeros_like(param.data) if g is None else np.array(g, dtype=np.float64)
    for param in params or ():
        if param not in result:
            result[param] = np.zeros_like(param.data)
    return result


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for i, p in enumerate(params):
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        return state


def adam_step(params: Sequence[Parameter], grads: GradientMap, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam step; parameters get fresh arrays, never in-place writes."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.m)} tensors, got {len(params)} parameters")
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None or g.shape != p.shape or state.m[i].shape != p.shape:
            got = None if g is None else g.shape
            raise ShapeError(f"adam: gradient shape {got} does not match parameter {p.name} {p.shape}")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for i, p in enumerate(params):
        g = grads[p]
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state
