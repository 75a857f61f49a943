"""Dense float64 tensors with reverse-mode autodiff.

Every op validates that its result is finite (NaN/Inf raises NumericError
immediately instead of propagating) and, when gradients are enabled and any
input requires them, records a backward closure on a per-forward tape. The
tape is just the parent links of the result; calling ``backward()`` on a
scalar walks it once in reverse topological order and is then garbage.

Only the ops the rest of the package needs are provided; all data is
row-major float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(name: str, data: np.ndarray) -> None:
    # sum() is one pass, no allocation; NaN and +-Inf both poison it.
    if not np.isfinite(data.sum()):
        raise NumericError(f"non-finite result in op '{name}'")


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping.

    Immutable after creation except for ``grad`` accumulation. ``_parents``
    and ``_backward`` exist only on op results while gradients are enabled.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # Make numpy defer to our reflected operators instead of coercing to an
    # object array when an ndarray meets a Tensor.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node. Scalar nodes seed with 1."""
        if grad is None:
            if self.data.ndim != 0:
                raise ShapeError(
                    f"backward() without explicit grad needs a scalar, got shape {self.shape}"
                )
            grad = np.array(1.0)
        # Iterative topo sort: recursion would overflow on long scan tapes.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)


def from_op(
    name: str,
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, recording the backward closure when taping."""
    _check_finite(name, data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced/stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise binary ops ---------------------------------------------------


def _binary(name: str, a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"{name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(db(g, a.data, b.data), b.shape))

    return from_op(name, data, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def maximum(a, b) -> Tensor:
    # Subgradient: ties route to the first argument.
    return _binary(
        "maximum",
        a,
        b,
        np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
    )


# -- elementwise unary ops ----------------------------------------------------


def _unary(name: str, a, fwd, dgrad) -> Tensor:
    a = as_tensor(a)
    data = fwd(a.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, dgrad(g, a.data, data))

    return from_op(name, data, (a,), backward)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, out: g * out)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda g, x, out: g / x)


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on a plain array (shared by inference paths)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, np_sigmoid, lambda g, x, out: g * out * (1.0 - out))


def silu(a) -> Tensor:
    def fwd(x):
        return x / (1.0 + np.exp(-x))

    def dgrad(g, x, out):
        s = out / np.where(x != 0, x, 1.0)  # sigmoid(x); exact 0.5 at x=0
        s = np.where(x != 0, s, 0.5)
        return g * (s + out * (1.0 - s))

    return _unary("silu", a, fwd, dgrad)


def pow_const(a, p: float) -> Tensor:
    p = float(p)
    return _unary(
        "pow", a, lambda x: x**p, lambda g, x, out: g * p * x ** (p - 1.0)
    )


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) with gradient blocked in the clamped region."""
    lo = float(lo)
    return _unary(
        "clamp_min",
        a,
        lambda x: np.maximum(x, lo),
        lambda g, x, out: g * (x > lo),
    )


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return from_op("sum", np.asarray(data), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops ----------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.reshape(old))

    return from_op("reshape", data, (a,), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs >=2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.transpose(inv))

    return from_op("transpose", data, (a,), backward)


def take(a, idx) -> Tensor:
    """Basic indexing (ints/slices/ellipsis). Backward scatters into a zeros buffer."""
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        buf[idx] = g  # basic indexing never aliases, plain assignment is exact
        _accum(a, buf)

    return from_op("slice", np.ascontiguousarray(data), (a,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return from_op("concatenate", data, tensors, backward)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    data = np.cumsum(a.data, axis=axis)

    def backward(g: np.ndarray) -> None:
        _accum(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return from_op("cumsum", data, (a,), backward)


# -- matmul / softmax ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """np.matmul semantics on the last two axes, broadcast leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"matmul: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return from_op("matmul", data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return from_op("softmax", data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g: np.ndarray) -> None:
        soft = np.exp(data)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return from_op("log_softmax", data, (a,), backward)


# -- gather / embedding -------------------------------------------------------


def take_rows(w, ids: np.ndarray) -> Tensor:
    """Row lookup w[ids]; the embedding primitive. ids is an int array."""
    w = as_tensor(w)
    ids = np.asarray(ids)
    data = w.data[ids]

    def backward(g: np.ndarray) -> None:
        if not w.requires_grad:
            return
        buf = np.zeros_like(w.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, w.shape[-1]))
        _accum(w, buf)

    return from_op("take_rows", data, (w,), backward)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """out[..., n] = a[..., n, idx[..., n]]; picks one entry along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        _accum(a, buf)

    return from_op("gather_last", data, (a,), backward)


# -- gradient oracle ----------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x``. ``coords``
    optionally restricts the check to a subset of flat coordinate indices
    (full sweep by default). Error metric per coordinate:
    |analytic - fd| / (|fd| + 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    x0 = x.data.copy()
    probe = Tensor(x0, requires_grad=True)
    out = f(probe)
    if out.ndim != 0:
        raise ShapeError(f"grad_check target must be scalar, got {out.shape}")
    base = out.item()
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x0)

    if f(Tensor(x0)).item() != base:
        raise RuntimeError("grad_check: function is not deterministic")

    flat = x0.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(flat.reshape(x0.shape))).item()
            flat[i] = orig - eps
            fm = f(Tensor(flat.reshape(x0.shape))).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
