"""Reverse-mode autodiff on dense numpy arrays.

Small tensor engine used by the whole package: a Tensor wraps an ndarray,
every operation records vector-Jacobian callbacks, and ``backward()`` walks
the graph once in reverse topological order. Gradients accumulate on leaf
tensors (parameters and explicitly created inputs); intermediate nodes are
transient. Training runs in float32 by default, and the same graph can be
built in float64 for gradient verification via ``set_default_dtype`` /
``using_dtype``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "tensor",
    "matmul",
    "softmax",
    "cross_entropy",
    "rmsnorm",
    "silu",
    "xlogx",
    "take_rows",
    "take_elems",
    "scatter_rows",
    "no_grad",
    "constant",
    "grad_enabled",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
]


class ShapeError(ValueError):
    """Raised when operands have incompatible or unsupported shapes."""


class NumericError(ArithmeticError):
    """Raised when an operation receives or would produce invalid numerics."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors ('float32' or 'float64')."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'float32' or 'float64'")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=_default_dtype)


class Tensor:
    """An ndarray plus an optional gradient slot and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # Sequence of (input_tensor, fn) pairs; fn maps the output gradient to
        # this input's gradient contribution. Empty for leaves.
        self._vjps: tuple = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable leaves.

        Each call performs one full reverse pass and *adds* its result into
        the ``.grad`` slots, so calling twice doubles leaf gradients.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, child_idx = stack.pop()
            if child_idx == 0:
                if id(node) in visited:
                    continue
                visited.add(id(node))
            if child_idx < len(node._vjps):
                stack.append((node, child_idx + 1))
                child = node._vjps[child_idx][0]
                if id(child) not in visited:
                    stack.append((child, 0))
            else:
                topo.append(node)

        acc: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            for child, fn in node._vjps:
                contrib = fn(g)
                prev = acc.get(id(child))
                if prev is None:
                    acc[id(child)] = contrib
                else:
                    prev += contrib
            if node.requires_grad and not node._vjps:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return _mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    # -- method forms of common ops -----------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable tensor, keeping its dtype.

    ``Tensor(...)`` casts to the default dtype; internal constants (masks,
    rotary tables) must instead match the dtype of the activations they
    combine with, whatever mode the surrounding graph runs in.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.requires_grad = False
    out._vjps = ()
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, vjps) -> Tensor:
    """Build an op output, recording vjps only when the graph is live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._vjps = ()
    out.requires_grad = False
    if grad_enabled():
        live = tuple((t, fn) for t, fn in vjps if t.requires_grad)
        if live:
            out._vjps = live
            out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic primitives ---------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(
        data,
        (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ),
    )


def _neg(a: Tensor) -> Tensor:
    return _make(-a.data, ((a, lambda g: -g),))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(
        data,
        (
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ),
    )


def _pow(a: Tensor, p: float) -> Tensor:
    data = a.data**p
    return _make(data, ((a, lambda g: g * p * a.data ** (p - 1.0)),))


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, ((a, lambda g: g * data),))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), ((a, lambda g: g / a.data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the SwiGLU activation component."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig
    return _make(data, ((a, lambda g: g * sig * (1.0 + a.data * (1.0 - sig))),))


def xlogx(a: Tensor) -> Tensor:
    """Elementwise x*ln(x) with the 0*ln(0) := 0 convention (x >= 0)."""
    pos = a.data > 0.0
    logs = np.zeros_like(a.data)
    np.log(a.data, out=logs, where=pos)
    data = np.where(pos, a.data * logs, 0.0)
    return _make(data, ((a, lambda g: g * np.where(pos, logs + 1.0, 0.0)),))


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make(a.data.reshape(shape), ((a, lambda g: g.reshape(orig)),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), ((a, lambda g: g.transpose(inv)),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g2 = g
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a.data.ndim + i if i < 0 else i for i in ax)
            for i in sorted(ax):
                g2 = np.expand_dims(g2, i)
        return np.broadcast_to(g2, a.data.shape).copy()

    return _make(np.asarray(data), ((a, vjp),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = tsum(a, axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.data.shape[i]
    return total * (1.0 / n)


# -- matmul ------------------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul with batching; both operands must have ndim >= 2."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)
    return _make(
        data,
        (
            (a, lambda g: _unbroadcast(np.matmul(g, _swap_last(b.data)), a.data.shape)),
            (b, lambda g: _unbroadcast(np.matmul(_swap_last(a.data), g), b.data.shape)),
        ),
    )


# -- softmax / losses --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-stable softmax along ``axis``; rejects non-finite input."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return data * (g - dot)

    return _make(data, ((a, vjp),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in nats over rows of ``logits``.

    logits: (M, V); targets: (M,) integer class ids. Uses a fused
    log-sum-exp forward and the (softmax - onehot)/M backward.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.data.shape}"
        )
    m, v = logits.data.shape
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= v:
        raise NumericError(f"target ids out of range [0, {v})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    rows = np.arange(m)
    nll = np.log(z) - shifted[rows, targets]
    data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def vjp(g):
        p = e / z[:, None]
        p[rows, targets] -= 1.0
        return p * (g / m)

    return _make(data, ((logits, vjp),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square norm over the last axis, scaled by ``gain``."""
    ms = tmean(x * x, axis=-1, keepdims=True)
    return x * ((ms + eps) ** -0.5) * gain


# -- gather / scatter --------------------------------------------------------


def take_rows(a: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding/dispatch gather).

    ``unique=True`` promises no index repeats, allowing a much faster direct
    write in the backward pass (np.add.at is slow); embedding lookups must
    leave it False because token ids repeat within a batch.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(idx)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _make(data, ((a, vjp),))


def take_elems(a: Tensor, rows: np.ndarray, cols: np.ndarray,
               unique: bool = False) -> Tensor:
    """Select elements a[rows, cols] of a 2-D tensor as a 1-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_elems expects a 2-D tensor, got {a.data.shape}")
    data = a.data[rows, cols]

    def vjp(g):
        out = np.zeros_like(a.data)
        if unique:
            out[rows, cols] = g
        else:
            np.add.at(out, (rows, cols), g)
        return out

    return _make(data, ((a, vjp),))


def scatter_rows(src: Tensor, idx: np.ndarray, n_rows: int,
                 unique: bool = False) -> Tensor:
    """Scatter-add rows of ``src`` into a zero (n_rows, d) tensor at ``idx``."""
    if src.data.ndim != 2:
        raise ShapeError(f"scatter_rows expects a 2-D tensor, got {src.data.shape}")
    idx = np.asarray(idx)
    out = np.zeros((n_rows, src.data.shape[1]), dtype=src.data.dtype)
    if unique:
        out[idx] = src.data
    else:
        np.add.at(out, idx, src.data)
    return _make(out, ((src, lambda g: g[idx]),))
