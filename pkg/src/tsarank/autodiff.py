"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the language model, the training losses) is built on
this module. Storage is row-major numpy float64; gradients accumulate
additively into ``Tensor.grad`` and the caller zeroes them between steps.
Tensors that do not require grad are immutable by convention and safe to
share across threads; a graph belongs to one logical thread from construction
through backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidAxisError(ValueError):
    """Axis argument out of range for the tensor's shape."""


class NonScalarLossError(ValueError):
    """backward() called on a tensor that is not a scalar."""


# Set False to skip graph construction (pure inference).
_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, values: np.ndarray, parents: tuple["Tensor", ...], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward_fn = backward_fn
            out._op = op
        else:
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    # ------------------------------------------------------------------
    # introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # Accumulation always rebinds (never writes in place), so storing a
        # view shared with another tensor's grad is safe.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A leaf view of the same values, severed from the graph."""
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        out._op = "detach"
        return out

    def backward(self) -> None:
        backward(self)

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.values = np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward_fn = None
    t._op = "const"
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_vals = a.values + b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_vals, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_vals = a.values - b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_vals, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_vals = a.values * b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    return Tensor._from_op(out_vals, (a, b), backward_fn, "mul")


def _require_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{op} produced non-finite values")
    return values


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_vals = _require_finite(a.values / b.values, "div")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return Tensor._from_op(out_vals, (a, b), backward_fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._from_op(-a.values, (a,), backward_fn, "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_vals = _require_finite(np.exp(a.values), "exp")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * out_vals)

    return Tensor._from_op(out_vals, (a,), backward_fn, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_vals = _require_finite(np.log(a.values), "log")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g / a.values)

    return Tensor._from_op(out_vals, (a,), backward_fn, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.tanh(a.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_vals * out_vals))

    return Tensor._from_op(out_vals, (a,), backward_fn, "tanh")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_vals = _require_finite(np.sqrt(a.values), "sqrt")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_vals)

    return Tensor._from_op(out_vals, (a,), backward_fn, "sqrt")


def pow_const(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out_vals = _require_finite(a.values ** exponent, "pow")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.values ** (exponent - 1.0))

    return Tensor._from_op(out_vals, (a,), backward_fn, "pow")


# ----------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out_vals = a.values.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out_vals, (a,), backward_fn, "reshape")


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.swapaxes(a.values, axis1, axis2)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, axis1, axis2))

    return Tensor._from_op(out_vals, (a,), backward_fn, "swapaxes")


# ----------------------------------------------------------------------
# matmul and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_vals = np.matmul(a.values, b.values)

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(out_vals, (a, b), backward_fn, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(np.float64, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(np.float64, copy=True))

    return Tensor._from_op(np.asarray(out_vals), (a,), backward_fn, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.values.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# softmax family


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise InvalidAxisError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax_logprobs(logits, axis: int = -1) -> Tensor:
    """Log-probabilities along ``axis``, computed with max subtraction."""
    a = _as_tensor(logits)
    axis = _check_axis(a, axis)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_vals = shifted - lse

    def backward_fn(g):
        if a.requires_grad:
            p = np.exp(out_vals)
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_vals, (a,), backward_fn, "log_softmax")


def softmax(logits, axis: int = -1) -> Tensor:
    a = _as_tensor(logits)
    axis = _check_axis(a, axis)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * out_vals).sum(axis=axis, keepdims=True)
            a._accumulate(out_vals * (g - dot))

    return Tensor._from_op(out_vals, (a,), backward_fn, "softmax")


# ----------------------------------------------------------------------
# gather ops


def embedding(weight, ids) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    w = _as_tensor(weight)
    idx = np.asarray(ids, dtype=np.int64)
    out_vals = w.values[idx]

    def backward_fn(g):
        if w.requires_grad:
            gw = np.zeros_like(w.values)
            np.add.at(gw, idx.reshape(-1), g.reshape(-1, w.shape[-1]))
            w._accumulate(gw)

    return Tensor._from_op(out_vals, (w,), backward_fn, "embedding")


def gather_last(a, ids) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., ids[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatchError(f"gather_last ids shape {idx.shape} must equal {a.shape[:-1]}")
    out_vals = np.take_along_axis(a.values, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if a.requires_grad:
            ga = np.zeros_like(a.values)
            np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
            a._accumulate(ga)

    return Tensor._from_op(out_vals, (a,), backward_fn, "gather_last")


# ----------------------------------------------------------------------
# graph traversal and backward


@dataclass
class GraphNode:
    """One recorded operation: its inputs, output, and local gradient rule."""

    output: Tensor
    inputs: tuple[Tensor, ...]
    op: str


class ComputeGraph:
    """Topologically ordered view of every op that reaches a root tensor.

    The order lists inputs before the nodes that consume them; traversal is
    depth-first over recorded parents, so it is deterministic for a given
    graph construction order.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.topo_order: list[Tensor] = order
        self.nodes: list[GraphNode] = [
            GraphNode(output=t, inputs=t._parents, op=t._op) for t in order if t._backward_fn is not None
        ]


def backward(loss: Tensor, params=None) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every reachable tensor that requires grad,
    accumulating additively. Parameters passed via ``params`` that the loss
    does not depend on receive an exact zero gradient.
    """
    if loss.values.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    graph = ComputeGraph(loss)
    loss._accumulate(np.ones_like(loss.values))
    for t in reversed(graph.topo_order):
        if t._backward_fn is not None and t.grad is not None:
            t._backward_fn(t.grad)
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.values)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam accumulators keyed by parameter name."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")


def adam_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {p.values.shape} for {name!r}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        p.values = p.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total
