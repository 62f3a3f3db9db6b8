"""Minimal dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the result keeps references to its parents and a closure that
pushes the output gradient back into them. :meth:`Tensor.backward` orders
the recorded graph topologically (the :class:`Tape`) and walks it in
reverse.

Broadcasting is restricted to trailing dimensions: the smaller operand's
shape must equal the trailing part of the larger one. Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "DomainError",
    "tensor",
    "zeros",
    "matmul",
    "add",
    "sub",
    "mul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "clip_min",
    "elementwise",
    "softmax",
    "einsum",
    "concat",
    "stack",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "gradient_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``"float64"``)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return mul(_sum(self, axis, keepdims), 1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every requires-grad ancestor of this scalar.

        Leaf gradients accumulate across calls; call ``zero_grad`` between
        optimizer steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        tape = Tape.record(self)
        for node in tape.nodes:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape).copy()
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate buffers are not needed after the pass
        for node in tape.nodes:
            if node._parents and node is not self:
                node.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g


@dataclass
class Tape:
    """Operations reachable from a root, in topological (creation) order."""

    nodes: list[Tensor]

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# helpers


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap a plain operand in the dtype of its tensor partner."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return _as_tensor(a), _as_tensor(b)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: tuple, b: tuple, opname: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == len(long_) or tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeError(f"{opname}: shapes {a} and {b} are not trailing-broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch dimensions; ``b`` is 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            k, n = b.shape
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_reduce_to(g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * y))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def clip_min(x, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is zero where the floor is active."""
    x = _as_tensor(x)
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor).astype(x.dtype), (x,), lambda g: x._accumulate(g * keep))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# shape and reduction ops


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def _reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def _transpose(x: Tensor, axes) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: x._accumulate(np.transpose(g, inv)))


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g) if _is_fancy(idx) else x.grad.__setitem__(idx, x.grad[idx] + g)

    return _result(out, (x,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _result(out, tensors, backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``"ij,jk->ik"``) with gradients for every operand."""
    ops = [_as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ValueError("einsum needs an explicit output ('->')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError(f"einsum: {len(in_subs)} subscripts for {len(ops)} operands")
    try:
        out = np.einsum(subscripts, *[o.data for o in ops], optimize=len(ops) > 2)
    except ValueError as err:
        raise ShapeError(f"einsum {subscripts!r}: {err}") from None

    def backward(g):
        for i, t in enumerate(ops):
            if not t.requires_grad:
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            avail = set(out_sub).union(*others) if others else set(out_sub)
            target = "".join(c for c in in_subs[i] if c in avail)
            spec = ",".join([out_sub] + others) + "->" + target
            gi = np.einsum(spec, g, *[o.data for j, o in enumerate(ops) if j != i], optimize=len(ops) > 2)
            if target != in_subs[i]:
                # indices summed only within this operand: broadcast back
                expand = [in_subs[i].index(c) for c in in_subs[i] if c not in avail]
                gi = np.expand_dims(gi, tuple(sorted(expand)))
                gi = np.broadcast_to(gi, t.shape)
            t._accumulate(gi)

    return _result(np.asarray(out, dtype=ops[0].dtype), ops, backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the report carries the worst one. Inputs must be 64-bit. With
    ``max_coords`` only that many randomly chosen coordinates per input are
    perturbed.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in inputs:
        if x.dtype != np.float64:
            raise ContractError("gradient_check requires float64 tensors")
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = rng or np.random.default_rng(0)
    worst, count = 0.0, 0
    with no_grad():
        for x, a in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            idxs = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idxs = rng.choice(flat.size, size=max_coords, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data.sum())
                flat[i] = orig - eps
                fm = float(f(*inputs).data.sum())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = a.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
                count += 1
    for x in inputs:
        x.grad = None
    return GradCheckReport(float(worst), tol, count)
