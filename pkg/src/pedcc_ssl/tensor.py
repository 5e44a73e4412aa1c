"""Dense double-precision tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
adjoint to parent adjoints. ``Tensor.backward`` walks the recorded graph
in reverse topological order. Leaf tensors with ``requires_grad`` accumulate
into ``.grad`` across calls; clear them with :func:`zero_grads`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericDomainError(ArithmeticError):
    """An operation left its numeric domain (log of <=0, division by 0, non-finite)."""


class ContractError(RuntimeError):
    """A caller broke an operation's usage contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "flags", "_parents", "_backward", "_hooks")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericDomainError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.flags: dict | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self._hooks: list[Callable[[np.ndarray], np.ndarray]] = []

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def register_hook(self, fn: Callable[[np.ndarray], np.ndarray]) -> None:
        """Transform the adjoint arriving at this tensor before it propagates further."""
        self._hooks.append(fn)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    # -- reverse pass ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(graph_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for hook in node._hooks:
                g = np.asarray(hook(g), dtype=np.float64)
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def graph_order(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded graph ending at ``root`` (inputs first)."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericDomainError(f"non-finite values produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.op = op
    t.flags = None
    t._hooks = []
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericDomainError("div: division by zero")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log: argument must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise NumericDomainError("power: fractional exponent of a negative base")
    if p < 0 and np.any(a.data == 0):
        raise NumericDomainError("power: negative exponent of zero")
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); values at or below the floor receive zero adjoint."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def sqrt(a) -> Tensor:
    return power(a, 0.5)


# -- linear algebra and shape ---------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "take")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# -- reductions ------------------------------------------------------------------
def _norm_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} invalid for shape {a.shape}")
    return tuple(ax % a.ndim for ax in axes)


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(a, axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(a, axis)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.sum(axis=axes, keepdims=keepdims) / count
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims) / count,), "mean")


def reduce(op: str, a, axis=None, keepdims=False) -> Tensor:
    if op == "sum":
        return sum(a, axis, keepdims)
    if op == "mean":
        return mean(a, axis, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


# -- fused numerics ----------------------------------------------------------------
def logsumexp(a, axis: int = -1) -> Tensor:
    """Row-wise log(sum(exp(a))) with max subtraction; output keeps the reduced axis."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    soft = e / s
    return _make(shift + np.log(s), (a,), lambda g: (g * soft,), "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def l2_normalize_rows(a, epsilon: float = NORM_EPS) -> Tensor:
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``epsilon`` pass through unchanged (identity
    adjoint); their indices are exposed as ``degenerate_rows`` on the result.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    degenerate = norms[:, 0] < epsilon
    safe = np.where(degenerate[:, None], 1.0, norms)
    out = a.data / safe

    def backward(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        ga = (g - out * proj) / safe
        ga[degenerate] = g[degenerate]
        return (ga,)

    result = _make(out, (a,), backward, "l2_normalize_rows")
    result.flags = {"degenerate_rows": np.flatnonzero(degenerate)}
    return result


def degenerate_rows(t: Tensor) -> np.ndarray:
    """Indices of rows that ``l2_normalize_rows`` left unnormalized."""
    if t.flags and "degenerate_rows" in t.flags:
        return t.flags["degenerate_rows"]
    return np.array([], dtype=np.int64)


def pairwise_sqdist(a, b) -> Tensor:
    """Matrix of squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqdist: incompatible shapes {a.shape} and {b.shape}")
    out = kernels.pairwise_sqdist(a.data, b.data)

    def backward(g):
        ga = 2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return ga, gb

    return _make(out, (a, b), backward, "pairwise_sqdist")


def stop_gradient(a) -> Tensor:
    """Same values, no history: the reverse pass treats the result as a constant."""
    a = as_tensor(a)
    return Tensor(a.data, op="stop_gradient")


def elementwise(op: str, *args) -> Tensor:
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
        "neg": neg, "scale": scale, "power": power,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# -- convolution ---------------------------------------------------------------------
def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (F, C, kh, kw) filters, via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gr = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gr.T @ cols).reshape(w.shape)
        gcols = (gr @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


# -- finite differences ------------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], t, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst relative error between the analytic gradient of ``f`` at ``t`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(as_tensor(t).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    def value(arr):
        v = f(Tensor(arr)).data
        if v.size != 1 or not np.isfinite(v).all():
            raise NumericDomainError("grad_check: non-finite or non-scalar evaluation")
        return float(v.reshape(-1)[0])

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[k] += h
        minus[k] -= h
        flat[k] = (value(plus.reshape(base.shape)) - value(minus.reshape(base.shape))) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
