"""Reverse-mode automatic differentiation on numpy float64 arrays.

A Tensor wraps an ndarray; ops run eagerly and, when a Tape is active, append
a record with the closure needed for the backward pass.  The tape is rebuilt
on every forward pass (define by run) and replayed once, in reverse, to
populate gradients.  No op ever mutates its inputs, so re-running a forward
pass reproduces the same values bit for bit.

Broadcasting follows trailing-dimension alignment only; anything fancier has
to be spelled out with reshape / broadcast_to / tile.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic dunders delegate to the module-level ops
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

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; append order is already topological."""

    __slots__ = ("_entries", "_tracked", "_consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        """Replay the tape once; fill .grad on every participating requires_grad
        leaf.  With `params`, also return their gradients in order, zeros for
        parameters the loss never touched."""
        if self._consumed:
            raise ValueError("backward already called for this tape; rebuild the graph")
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None or not self._tracks(inp):
                    continue
                acc = grads.get(id(inp))
                # never accumulate in place: ops may hand back aliased arrays
                grads[id(inp)] = g_in if acc is None else acc + g_in

        leaves: dict[int, Tensor] = {}
        for _, inputs, _ in self._entries:
            for inp in inputs:
                if inp.requires_grad:
                    leaves[id(inp)] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        if params is not None:
            return [grads.get(id(p), np.zeros_like(p.data)) for p in params]
        return None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(tape._tracks(t) for t in inputs):
            tape._tracked.add(id(out))
            tape._entries.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a.data, b.data)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a.data, b.data)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a.data, b.data)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a.data, b.data)
    if np.any(b.data == 0.0):
        idx = int(np.argmax(b.data == 0.0))
        raise DomainError(f"div: zero denominator at flat index {idx}")
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0.0):
        idx = int(np.argmax(a.data < 0.0))
        raise DomainError(f"pow: negative base with fractional exponent at flat index {idx}")
    if p < 0 and np.any(a.data == 0.0):
        idx = int(np.argmax(a.data == 0.0))
        raise DomainError(f"pow: zero base with negative exponent at flat index {idx}")
    out = Tensor(a.data ** p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or b.ndim == 1:
        raise ConfigError(f"matmul: unsupported operand ranks {a.data.shape} @ {b.data.shape}")
    squeeze = False
    ad = a.data
    if ad.ndim == 1:
        ad = ad[None, :]
        squeeze = True
    if ad.shape[-1] != b.data.shape[-2]:
        raise ConfigError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    if ad.ndim > 2 and b.data.ndim > 2:
        _broadcast_check("matmul", ad[..., 0, 0], b.data[..., 0, 0])
    res = np.matmul(ad, b.data)
    out = Tensor(res[0] if squeeze else res)

    def backward(g):
        gm = g[None, :] if squeeze else g
        ga = _unbroadcast(np.matmul(gm, np.swapaxes(b.data, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), gm), b.data.shape)
        if squeeze:
            ga = ga[0]
        return ga, gb

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        idx = int(np.argmax(a.data <= 0.0))
        raise DomainError(f"log: non-positive input at flat index {idx}")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        idx = int(np.argmax(a.data < 0.0))
        raise DomainError(f"sqrt: negative input at flat index {idx}")
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = Tensor(np.logaddexp(0.0, a.data))

    def backward(g):
        # d softplus = sigmoid, computed stably
        return (g / (1.0 + np.exp(-a.data)),)

    return _record(out, (a,), backward)


def lgamma(a) -> Tensor:
    from scipy.special import digamma, gammaln

    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        idx = int(np.argmax(a.data <= 0.0))
        raise DomainError(f"lgamma: non-positive input at flat index {idx}")
    out = Tensor(gammaln(a.data))
    return _record(out, (a,), lambda g: (g * digamma(a.data),))


# ---------------------------------------------------------------------------
# reductions and normalizations (last-axis variants where noted)

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return _record(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes])) if axes else 1
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _record(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        res = np.log(s) + m  # s == 0 means every term was -inf; keep the -inf
    out = Tensor(res if keepdims else np.squeeze(res, axis=axis))
    s_safe = np.where(s == 0.0, 1.0, s)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * e / s_safe,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        res = a.data.reshape(shape)
    except ValueError:
        raise ConfigError(f"reshape: cannot view {a.data.shape} as {shape}") from None
    out = Tensor(res)
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def swap_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ConfigError(f"swap_last2: needs rank >= 2, got shape {a.data.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        res = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ConfigError(f"broadcast_to: cannot expand {a.data.shape} to {shape}") from None
    out = Tensor(res)
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        res = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ConfigError(f"concat: incompatible shapes {[p.data.shape for p in parts]}") from None
    out = Tensor(res)
    ax = axis % res.ndim
    sizes = [p.data.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(out, tuple(parts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if start < 0 or start + length > a.data.shape[ax]:
        raise ConfigError(
            f"narrow: [{start}:{start + length}) out of range for axis {ax} of {a.data.shape}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)
    out = Tensor(a.data[tuple(sl)])

    def backward(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask (no gradient for mask)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, a.data, b.data))

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# finite-difference gradient check

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Max relative error between tape gradients of fn(*inputs) and central
    finite differences.  Error is measured as |a - b| / max(1, |a|, |b|)."""
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("gradcheck inputs must have requires_grad=True")
    with Tape() as tape:
        loss = fn(*inputs)
    grads = tape.backward(loss, params=list(inputs))

    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            worst = max(worst, err)
    return worst
