"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape-based engine in the micrograd style: every operation on a
gradient-tracked :class:`Tensor` records its parents and a local adjoint
rule, and :func:`backward` replays the records once, in reverse topological
order.  The tape is rebuilt on every forward pass; there is no persistent
graph.

All values are float64.  Every public operation verifies that its result is
finite and raises instead of storing NaN/Inf.  Broadcasting follows the
trailing-dimension rule (numpy semantics); gradients of broadcast operands
are summed back to the operand shape.

The functional ops (:func:`add`, :func:`matmul`, :func:`tanh`, ...) also
accept plain numpy arrays and scalars.  When no Tensor is involved they
return a plain array, so model code written against this module runs
gradient-free at raw numpy speed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GradError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "scale",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "clip",
    "backward",
    "topo_order",
]


class ShapeError(ValueError):
    """Operand shapes do not match or broadcast."""


class NonFiniteError(ArithmeticError):
    """An operation produced (or would produce) a NaN or infinity."""


class GradError(RuntimeError):
    """Invalid use of the autodiff tape."""


def _to_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _broadcast_check(a_shape, b_shape, op: str):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} do not broadcast"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes a broadcast expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


class Tensor:
    """A dense float64 array plus optional tape bookkeeping.

    ``requires_grad`` leaves accumulate into ``grad`` during
    :func:`backward`.  Detached tensors keep ``grad`` as ``None``; it is
    never zero-filled.  Data is treated as immutable after construction; the
    only sanctioned in-place mutation is a training update on a parameter's
    ``data`` buffer between forward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, grad_fn) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = bool(parents)
        t._parents = parents
        t._grad_fn = grad_fn
        t._backward_done = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no tape connection."""
        return Tensor._from_op(self.data, (), None)

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic sugar; all routing goes through the functional ops
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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _tracked(*xs) -> tuple:
    return tuple(x for x in xs if isinstance(x, Tensor) and x.requires_grad)


def _acc(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _binary(a, b, op: str, fwd, da, db):
    ad, bd = _to_array(a), _to_array(b)
    _broadcast_check(ad.shape, bd.shape, op)
    if not _any_tensor(a, b):
        return fwd(ad, bd)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _check_finite(fwd(ad, bd), op)
    parents = _tracked(a, b)
    if not parents:
        return Tensor._from_op(out, (), None)

    def grad_fn(g: np.ndarray) -> None:
        if isinstance(a, Tensor) and a.requires_grad:
            _acc(a, _unbroadcast(da(g, ad, bd, out), ad.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, _unbroadcast(db(g, ad, bd, out), bd.shape))

    return Tensor._from_op(out, parents, grad_fn)


def _unary(a, op: str, fwd, da):
    ad = _to_array(a)
    if not isinstance(a, Tensor):
        return fwd(ad)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _check_finite(fwd(ad), op)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def grad_fn(g: np.ndarray) -> None:
        _acc(a, da(g, ad, out))

    return Tensor._from_op(out, (a,), grad_fn)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    bd = _to_array(b)
    if np.any(bd == 0.0):
        raise ZeroDivisionError("div: denominator contains zero")
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def neg(a):
    return _unary(a, "neg", lambda x: -x, lambda g, x, o: -g)


def exp(a):
    return _unary(a, "exp", np.exp, lambda g, x, o: g * o)


def log(a):
    ad = _to_array(a)
    if np.any(ad <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _unary(a, "log", np.log, lambda g, x, o: g / x)


def tanh(a):
    return _unary(a, "tanh", np.tanh, lambda g, x, o: g * (1.0 - o * o))


def relu(a):
    # subgradient at 0 is taken as 0
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0),
                  lambda g, x, o: g * (x > 0.0))


def scale(a, c: float):
    """Multiply by a plain scalar constant."""
    if isinstance(c, Tensor) or np.ndim(c) != 0:
        raise TypeError("scale expects a scalar constant")
    return mul(a, float(c))


def matmul(a, b):
    ad, bd = _to_array(a), _to_array(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ for shapes {ad.shape} and {bd.shape}"
        )
    if not _any_tensor(a, b):
        return ad @ bd
    out = _check_finite(ad @ bd, "matmul")
    parents = _tracked(a, b)
    if not parents:
        return Tensor._from_op(out, (), None)

    def grad_fn(g: np.ndarray) -> None:
        if isinstance(a, Tensor) and a.requires_grad:
            _acc(a, g @ bd.T)
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, ad.T @ g)

    return Tensor._from_op(out, parents, grad_fn)


def tsum(a, axis=None, keepdims=False):
    ad = _to_array(a)
    if not isinstance(a, Tensor):
        return np.sum(ad, axis=axis, keepdims=keepdims)
    out = _check_finite(np.sum(ad, axis=axis, keepdims=keepdims), "sum")
    out = np.asarray(out)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def grad_fn(g: np.ndarray) -> None:
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, ad.shape))

    return Tensor._from_op(out, (a,), grad_fn)


def tmean(a, axis=None, keepdims=False):
    ad = _to_array(a)
    n = ad.size if axis is None else ad.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    ad = _to_array(a)
    out_data = ad.reshape(shape)
    if not isinstance(a, Tensor):
        return out_data
    if not a.requires_grad:
        return Tensor._from_op(out_data, (), None)

    def grad_fn(g: np.ndarray) -> None:
        _acc(a, g.reshape(ad.shape))

    return Tensor._from_op(out_data, (a,), grad_fn)


def concat(parts: Sequence, axis: int = -1):
    datas = [_to_array(p) for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    if not any(isinstance(p, Tensor) for p in parts):
        return out_data
    _check_finite(out_data, "concat")
    parents = _tracked(*parts)
    if not parents:
        return Tensor._from_op(out_data, (), None)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    ax = axis if axis >= 0 else out_data.ndim + axis

    def grad_fn(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Tensor) and p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _acc(p, g[tuple(idx)])

    return Tensor._from_op(out_data, parents, grad_fn)


def clip(a, lo: float, hi: float):
    ad = _to_array(a)
    if not isinstance(a, Tensor):
        return np.clip(ad, lo, hi)
    out = np.clip(ad, lo, hi)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def grad_fn(g: np.ndarray) -> None:
        _acc(a, g * ((ad >= lo) & (ad <= hi)))

    return Tensor._from_op(out, (a,), grad_fn)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_ELEMENTWISE_UNARY = {"exp": exp, "log": log, "tanh": tanh, "relu": relu}


def elementwise(kind: str, a, b=None):
    """Dispatch an elementwise primitive by name.

    ``kind`` is one of add, sub, mul, div, exp, log, tanh, relu,
    scale-by-constant.  Binary kinds require ``b``; unary kinds reject it.
    """
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise {kind!r} needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise {kind!r} takes one operand")
        return _ELEMENTWISE_UNARY[kind](a)
    if kind == "scale-by-constant":
        if b is None:
            raise ValueError("elementwise 'scale-by-constant' needs a constant")
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def topo_order(root: Tensor) -> list:
    """Tape order for ``root``: every node once, parents before children."""
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
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-tracked leaf below ``loss``.

    ``loss`` must be a scalar.  Running backward twice on the same tape is
    an error; rebuild the forward pass (or ``zero_grad``) first.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GradError("backward already ran on this tape; rebuild the forward pass")
    loss._backward_done = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo_order(loss)):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)
