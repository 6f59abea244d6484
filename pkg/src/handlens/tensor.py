"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output
tensor; ``backward(loss)`` replays the recorded graph in reverse
topological order. Gradients accumulate into ``.grad`` (calling backward
twice without a reset doubles every gradient). All arithmetic is 64-bit,
and non-finite values are rejected at op boundaries so a diverging
computation raises instead of silently corrupting downstream state.

Broadcasting rule (deliberately restricted): shapes are right-aligned and
the shorter shape is padded with leading 1s; each aligned axis must either
match or be 1 on one side. This covers scalars, per-channel factors like
``(C, 1, 1)`` against ``(N, C, H, W)``, and bias rows, which is all the
model stack needs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "concat",
    "matmul",
    "no_grad",
    "relu",
    "seeded_normal",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an operation boundary."""


# Gradient recording is on unless suspended via no_grad(). The graph and
# this flag are confined to a single logical thread (see package docs);
# read-only inference on finished tensors may happen anywhere.
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording (inference / data preparation)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _check_finite(arr: np.ndarray, where: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


def _as_array(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    The value is immutable by convention once created; only ``grad`` is
    written to (by ``backward``). ``requires_grad`` marks leaves whose
    gradient the caller wants; it propagates to results automatically.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_rule: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor data")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_rule = _backward_rule

    # -- construction -------------------------------------------------

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Sequence[float],
                  requires_grad: bool = False) -> "Tensor":
        """Build a tensor from a shape and a flat row-major value list."""
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative dimension in shape {shape}")
        flat = np.asarray(values, dtype=np.float64).ravel()
        if math.prod(shape) != flat.size:
            raise ShapeError(
                f"shape {shape} needs {math.prod(shape)} values, got {flat.size}"
            )
        return cls(flat.reshape(shape), requires_grad=requires_grad)

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)

    # -- basic properties ---------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut loose from the recorded graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing -----------------------------------------------

    def _is_recording(self, *others: "Tensor") -> bool:
        return _grad_enabled and (
            self.requires_grad or any(t.requires_grad for t in others)
        )

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def backward(self) -> None:
        backward(self)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def seeded_normal(shape, seed: int, std: float = 1.0) -> Tensor:
    """Reproducible pseudo-normal tensor: same (shape, seed, std) is bitwise stable."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)))


# -- broadcasting helpers ----------------------------------------------


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(a[::-1], b[::-1]):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def make_op(
    out_data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_rule: Callable[[np.ndarray], tuple],
    name: str = "op",
) -> Tensor:
    """Create the output tensor of an operation, recording the rule if needed.

    ``backward_rule(out_grad)`` must return one gradient array (or None)
    per parent, already shaped like that parent. This is the extension
    seam the layer library builds on.
    """
    _check_finite(out_data, name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=parents,
                      _backward_rule=backward_rule)
    return Tensor(out_data)


def _binary(name: str, a, b, fwd, bwd) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")
    out = fwd(a.data, b.data)

    def rule(g):
        ga, gb = bwd(g, a.data, b.data)
        return (_unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if gb is not None else None)

    return make_op(out, (a, b), rule, name)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    b_t = _coerce(b)
    if (b_t.data == 0).any():
        raise ZeroDivisionError("div: divisor contains an exact zero")
    return _binary(
        "div", a, b_t, np.divide,
        lambda g, x, y: (g / y, -g * x / (y * y)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product; dA = G @ B^T, dB = A^T @ G."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(out, (a, b), rule, "matmul")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _reduce(t: Tensor, axes, mean: bool) -> Tensor:
    t = _coerce(t)
    axes = _normalize_axes(axes, t.ndim)
    if not axes:  # empty axis list reduces nothing
        return reshape(t, *t.shape)
    count = math.prod(t.shape[ax] for ax in axes)
    out = t.data.sum(axis=axes)
    if mean:
        out = out / count
    keep_shape = tuple(1 if i in axes else s for i, s in enumerate(t.shape))

    def rule(g):
        g = g.reshape(keep_shape)
        if mean:
            g = g / count
        return (np.broadcast_to(g, t.shape),)

    return make_op(out, (t,), rule, "mean" if mean else "sum")


def reduce_sum(t: Tensor, axes=None) -> Tensor:
    return _reduce(t, axes, mean=False)


def reduce_mean(t: Tensor, axes=None) -> Tensor:
    return _reduce(t, axes, mean=True)


def relu(t: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    t = _coerce(t)
    out = np.maximum(t.data, 0.0)
    mask = t.data > 0

    def rule(g):
        return (g * mask,)

    return make_op(out, (t,), rule, "relu")


def reshape(t: Tensor, *shape) -> Tensor:
    t = _coerce(t)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new = np.reshape(t.data, shape)
    old_shape = t.shape

    def rule(g):
        return (g.reshape(old_shape),)

    return make_op(np.ascontiguousarray(new), (t,), rule, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along one axis; backward splits the gradient back."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in ts])

    def rule(g):
        pieces = []
        index = [slice(None)] * g.ndim
        for i in range(len(ts)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(index)]))
        return tuple(pieces)

    return make_op(out, tuple(ts), rule, "concat")


# -- backward pass -----------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the recorded graph (depth-safe)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires_grad tensor reachable from ``loss``.

    Adjoints are per-pass internal state; only the final per-tensor sums
    land in ``.grad``, so repeating the call doubles every gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_rule is None:
            continue
        grads = node._backward_rule(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "gradient")
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
