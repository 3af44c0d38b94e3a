"""Dense tensors with reverse-mode automatic differentiation.

Every value is a row-major numpy buffer.  Operations record a closure that
maps the output gradient to input gradients; :meth:`Tensor.backward` replays
those closures in reverse topological order.

Non-finite results never raise mid-graph.  They set a sticky flag instead,
see :func:`nonfinite_seen`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "nonfinite_seen",
    "reset_nonfinite",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "power",
    "sqrt",
    "clip",
    "sum",
    "mean",
    "broadcast_to",
    "reshape",
    "transpose",
    "concatenate",
    "getitem",
    "matmul",
    "embedding",
    "softmax",
    "log_softmax",
    "where",
    "stop_gradient",
    "finite_diff_check",
    "finite_diff_check_params",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_nonfinite = {"seen": False}


def nonfinite_seen() -> bool:
    """True once any operation has produced a NaN or infinity."""
    return _nonfinite["seen"]


def reset_nonfinite() -> None:
    _nonfinite["seen"] = False


def _flag(values: np.ndarray) -> np.ndarray:
    if values.dtype.kind == "f" and not _nonfinite["seen"]:
        if not np.isfinite(values).all():
            _nonfinite["seen"] = True
    return values


class Tensor:
    """n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError("backward", grad.shape, self.shape)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _flag(data)
    out.grad = None
    out.op = op
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


def _result_dtype(a: Tensor, b: Tensor):
    return np.result_type(a.dtype, b.dtype)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    av, bv = a.data, b.data
    out = (av * bv).astype(_result_dtype(a, b), copy=False)

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    av, bv = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (av / bv).astype(_result_dtype(a, b), copy=False)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / av,)

    return _make(out, (a,), backward, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) without overflow."""
    av = a.data
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(av),), "softplus")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a Python scalar")
    av = a.data
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(av, p).astype(av.dtype, copy=False)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            if p == 2.0:
                return (g * 2.0 * av,)
            return (g * p * np.power(av, p - 1.0),)

    return _make(out, (a,), backward, "power")


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    av = a.data
    out = np.clip(av, lo, hi)
    inside = (av >= lo) & (av <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _binary_operands("where", a, b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _make(out, (a, b), backward, "where")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.data
    axes = _norm_axes(axis, av.ndim)
    # accumulate in 64 bits regardless of storage precision
    out = np.sum(av, axis=axes, dtype=np.float64, keepdims=keepdims).astype(av.dtype)
    shape = av.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape)
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    sa = a.shape
    return _make(out, (a,), lambda g: (_unbroadcast(g, sa),), "broadcast_to")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    sa = a.shape
    return _make(out, (a,), lambda g: (g.reshape(sa),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concatenate: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *[t.shape for t in tensors]) from None
    axis = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tensors, backward, "concatenate")


def getitem(a: Tensor, index) -> Tensor:
    """Basic and integer-array indexing; backward scatters with accumulation."""
    out = np.array(a.data[index], copy=True)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 1 or bv.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape)
    if av.ndim == 1 or bv.ndim == 1:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` [V, w] at integer ``indices`` (any shape)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"embedding: indices must be integers, got {idx.dtype}")
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: index out of range [0, {table.shape[0]}) "
            f"(got min {idx.min()}, max {idx.max()})"
        )
    out = table.data[idx]
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(out, (table,), backward, "embedding")


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, normalised in 64 bits.

    ``mask`` (broadcastable, True = keep) gives dropped slots probability
    exactly zero, so they cannot leak into the output.
    """
    av = a.data.astype(np.float64)
    if mask is not None:
        av = np.where(mask, av, -np.inf)
    shifted = av - np.max(av, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype)

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - inner),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    av = a.data
    shifted = av.astype(np.float64) - np.max(av, axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = (shifted - lse).astype(av.dtype)
    probs = np.exp(out)

    def backward(g):
        total = np.sum(g, axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (g - probs * total,)

    return _make(out, (a,), backward, "log_softmax")


# -- gradient checking -------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Largest relative gap between the analytic and central-difference gradient.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor.  ``indices``
    restricts the comparison to a subset of flat components.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if isinstance(out, Tensor):
        out.backward()
    analytic = probe.grad.reshape(-1)

    flat = base.reshape(-1)
    comps = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for i in comps:
        old = flat[i]
        flat[i] = old + eps
        up = _scalar(f(Tensor(base)))
        flat[i] = old - eps
        down = _scalar(f(Tensor(base)))
        flat[i] = old
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-12)
        worst = max(worst, err)
    return float(worst)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    picks: Iterable[tuple[int, int]],
    eps: float = 1e-5,
) -> float:
    """Like :func:`finite_diff_check` but perturbs parameters in place.

    ``picks`` lists ``(parameter number, flat component)`` pairs.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for pi, ci in picks:
        p = params[pi]
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)[ci]
        old = flat[ci]
        flat[ci] = old + eps
        up = _scalar(loss_fn())
        flat[ci] = old - eps
        down = _scalar(loss_fn())
        flat[ci] = old
        numeric = (up - down) / (2.0 * eps)
        worst = max(worst, abs(analytic - numeric) / (abs(analytic) + 1e-12))
    return float(worst)
