"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation checks its output for NaN/Inf and, while a Graph is active,
records a node on the tape. The tape's creation order is a topological order
by construction, so `backward` is a single reverse sweep that accumulates
gradients additively across fan-out. Gradients are populated on every tensor
the loss reaches, including intermediates (the straight-through machinery in
the VQ-VAE relies on that).

Scope is deliberately small: no GPU, no convolutions, no graph rewriting,
float64 only.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalError, UsageError

Array = np.ndarray


def _check_finite(op: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op}: produced non-finite values")


class Tensor:
    """A shaped float64 array plus gradient slot.

    `data` is the row-major value array; `grad`, once populated by
    `backward`, has the same shape. Leaves created with requires_grad=True
    are trainable parameters or probe points for input gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> Array:
        """Flat row-major view of the value array."""
        return self.data.ravel()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item: tensor has shape {self.shape}, not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; all arithmetic goes through the module-level ops so it
    # lands on the active tape.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    """A tensor detached from any graph (no gradient ever flows into it)."""
    if isinstance(values, Tensor):
        return Tensor(values.data.copy())
    return Tensor(values)


class Node:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Graph:
    """Operation tape. Usable as a context manager:

        with Graph() as g:
            loss = ...
        backward(g, loss)

    A graph and its tensors belong to one worker at a time; concurrent work
    should use distinct graphs.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _GRAPH_STACK.pop()
        return False

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def _record(self, node: Node) -> None:
        self.nodes.append(node)
        self._output_ids.add(id(node.output))


_GRAPH_STACK: list[Graph] = []


def active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _finalize(op: str, inputs: Sequence[Tensor], out_data: Array, grad_fn: Callable) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph._record(Node(op, tuple(inputs), out, grad_fn))
    return out


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_data(op: str, a: Tensor, b: Tensor, fn) -> Array:
    try:
        with np.errstate(all="ignore"):
            return fn(a.data, b.data)
    except ValueError:
        raise UsageError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("add", a, b, np.add)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finalize("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("sub", a, b, np.subtract)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finalize("sub", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("mul", a, b, np.multiply)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finalize("mul", (a, b), out, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _finalize("matmul", (a, b), out, grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def grad_fn(g):
        return (g * mask,)

    return _finalize("relu", (a,), out, grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _finalize("sigmoid", (a,), out, grad_fn)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, computed with max subtraction."""
    if a.data.ndim < 1:
        raise UsageError(f"softmax: needs at least one axis, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finalize("softmax", (a,), out, grad_fn)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _finalize("log", (a,), out, grad_fn)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _finalize("exp", (a,), out, grad_fn)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def grad_fn(g):
        return (2.0 * a.data * g,)

    return _finalize("square", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# Reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors the op-kind name
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes if axes else None)

    def grad_fn(g):
        expanded = g
        for ax in sorted(axes):
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _finalize("sum", (a,), np.asarray(out, dtype=np.float64), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise UsageError(f"mean: reduction over empty axes of shape {a.shape}")
    out = a.data.mean(axis=axes if axes else None)

    def grad_fn(g):
        expanded = g
        for ax in sorted(axes):
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, a.shape).copy() / count,)

    return _finalize("mean", (a,), np.asarray(out, dtype=np.float64), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat: needs at least one input")
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise UsageError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _finalize("concat", tuple(tensors), out, grad_fn)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only); gradients scatter back."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)):
            raise UsageError(f"slice: unsupported index component {k!r}")
    try:
        out = a.data[key]
    except IndexError as err:
        raise UsageError(f"slice: index {key!r} invalid for shape {a.shape}: {err}") from None

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _finalize("slice", (a,), np.asarray(out, dtype=np.float64), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise UsageError(f"reshape: cannot view shape {a.shape} as {shape}") from None

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _finalize("reshape", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# Dispatch, backward pass, gradient checking

_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "square": square,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
}


def forward(op_kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply an operation by name. `concat` takes the input list whole;
    everything else is unpacked."""
    fn = _OP_TABLE.get(op_kind)
    if fn is None:
        raise UsageError(f"forward: unknown op kind {op_kind!r}")
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate `grad` on every tensor the loss reaches.

    Gradients accumulate additively across fan-out and across repeated
    backward calls; call `zero_grads` (or a fresh graph) between steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward: loss must be a scalar tensor")
    if not graph.contains(loss):
        raise UsageError("backward: loss tensor is not part of the given graph")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        if g_out.shape != node.output.shape:
            g_out = np.asarray(g_out, dtype=np.float64).reshape(node.output.shape)
        input_grads = node.grad_fn(g_out)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            _check_finite(f"backward[{node.op}]", gi)
            t.grad = gi.copy() if t.grad is None else t.grad + gi


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_difference_check(function: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    Relative error per coordinate is |analytic - central| / (|analytic| + 1e-8).
    A large return value near a kink (e.g. relu at 0) is the expected flag
    that the point is not differentiable; callers must avoid kinks.
    """
    if h <= 0:
        raise UsageError("finite_difference_check: h must be positive")
    probe = Tensor(point.data.copy(), requires_grad=True)
    with Graph() as g:
        out = function(probe)
    if out.data.size != 1:
        raise UsageError("finite_difference_check: function must return a scalar")
    backward(g, out)
    if probe.grad is None:
        analytic = np.zeros_like(probe.data).ravel()
    else:
        analytic = probe.grad.ravel().copy()

    base = probe.data.ravel().copy()

    def value_at(flat: Array) -> float:
        t = Tensor(flat.reshape(point.shape))
        v = function(t)
        val = float(v.data.reshape(()))
        if not np.isfinite(val):
            raise NumericalError("finite_difference_check: non-finite function value near point")
        return val

    max_rel = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        f_plus = value_at(bumped)
        bumped[i] = base[i] - h
        f_minus = value_at(bumped)
        central = (f_plus - f_minus) / (2.0 * h)
        rel = abs(analytic[i] - central) / (abs(analytic[i]) + 1e-8)
        if rel > max_rel:
            max_rel = rel
    return max_rel
