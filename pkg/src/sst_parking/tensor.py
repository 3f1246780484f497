"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable primitive records one entry on the thread-local
:class:`GradTape` when at least one input requires a gradient.  Calling
:func:`backward` on a scalar replays the tape in reverse, accumulates
``.grad`` on leaf tensors and clears the tape.

Arrays are numpy ``float64`` in C (row-major) order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradError(RuntimeError):
    pass


@dataclass
class TapeEntry:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    entries: list[TapeEntry] = field(default_factory=list)

    def record(self, inputs, output, vjp) -> None:
        self.entries.append(TapeEntry(tuple(inputs), output, vjp))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def current_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


# MAC accounting hook used to cross-check the analytic counter in model.py
@contextlib.contextmanager
def count_matmul_macs() -> Iterator[list[int]]:
    prev = getattr(_local, "macs", None)
    box = [0]
    _local.macs = box
    try:
        yield box
    finally:
        _local.macs = prev


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator; ``stream`` keys give independent reproducible substreams."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"empty dimension in shape {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(out: np.ndarray, inputs: Sequence[Tensor], vjp, what: str) -> Tensor:
    _check_finite(out, what)
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, req)
    if req:
        current_tape().record(inputs, res, vjp)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = as_tensor(a)
        return _op(a.data * s, (a,), lambda g: (g * s,), "mul")
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0  # subgradient at 0 is 0
    return _op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select: ``a`` where ``cond`` is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        g = np.broadcast_to(g, shape)
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _op(out, (a, b), vjp, "where")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)
    macs = getattr(_local, "macs", None)
    if macs is not None:
        m, k = a.shape[-2:]
        n = b.shape[-1]
        macs[0] += int(np.prod(batch, dtype=np.int64)) * m * k * n

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                a2 = np.broadcast_to(a.data, batch + a.shape[-2:]).reshape(-1, k)
                gb = a2.T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _op(out, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _op(y, (x,), vjp, "softmax")


def layer_norm(h: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = h.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = h.data.mean(axis=-1, keepdims=True)
    xc = h.data - mu
    # constant rows centre to exactly zero, so the output is exactly beta
    flat = h.data.max(axis=-1, keepdims=True) == h.data.min(axis=-1, keepdims=True)
    if flat.any():
        xc = np.where(flat, 0.0, xc)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = gg = gb = None
        if h.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _op(out, (h, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return _op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "permute",
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} on axis {axis}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _op(
        np.concatenate([x.data for x in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
        "concat",
    )


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    out_shape = np.shape(out)

    def vjp(g):
        gx = np.zeros_like(x.data)
        g = g.reshape(out_shape)
        if _is_advanced(idx):
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _op(np.array(out, dtype=np.float64), (x,), vjp, "slice")


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take(x: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    out = np.take(x.data, indices, axis=ax)

    def vjp(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (gx,)

    return _op(out, (x,), vjp, "take")


def masked_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Flat vector of the entries of ``x`` where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from tensor shape {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g
        return (gx,)

    return _op(x.data[mask], (x,), vjp, "masked_select")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            g = g.reshape(())
        elif not keepdims:
            g = np.expand_dims(g.reshape(np.shape(out)), axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _op(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _op(
        np.array([(diff * diff).sum() / n]),
        (a, b),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
        "mse",
    )


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("backward on a tensor that is not connected to any requires_grad input")
    tape = current_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()
    try:
        for entry in reversed(tape.entries):
            key = id(entry.output)
            produced.add(key)
            g = grads.pop(key, None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(gi, "backward")
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    holders[k] = t
        for k, g in grads.items():
            if k in produced:
                continue
            leaf = holders[k]
            g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    finally:
        tape.clear()
