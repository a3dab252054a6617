"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are appended to it
whenever one of their inputs requires a gradient; :func:`backward` replays the
tape in reverse and returns a :class:`Gradients` mapping for the leaves.

Only the broadcasting the models need is supported: elementwise ops follow
numpy rules and the backward pass sums the gradient back to each input shape.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from typing import Callable, Iterator

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "Gradients",
    "backward",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "concat",
    "slice_last",
    "split_last",
    "gather_rows",
    "layer_norm",
    "silu",
    "sigmoid",
    "log",
    "clip",
    "softmax_rows",
    "softmax_mean",
    "softmax_mean_weights",
]


class Tensor:
    """Row-major float64 array plus the bookkeeping needed for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(Tensor)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable leaf tensor.  ``requires_grad`` is False when frozen."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad


_Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; nesting is allowed and only the innermost tape
    records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], _Backward]] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor) -> "Gradients":
        return backward(loss, self)


class Gradients(Mapping):
    """Leaf tensor -> gradient array.  Leaves never reached map to zeros."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor) -> bool:
        return id(tensor) in self._grads

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._leaves[k] for k in self._grads)

    def __len__(self) -> int:
        return len(self._grads)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], fn: _Backward) -> Tensor:
    out = Tensor._wrap(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((out, parents, fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key not in produced:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return Gradients({k: grads[k] for k in leaves if k in grads}, leaves)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or a stacked left operand.

    A 2-D ``b`` is shared across the leading dimensions of ``a``.
    """
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                gb = ad.T @ g
            else:
                a2 = ad.reshape(-1, ad.shape[-1]) if bd.ndim == 2 else None
                if a2 is not None:
                    gb = a2.T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), fn)


def split_last(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if int(np.sum(sizes)) != a.shape[-1]:
        raise DimensionError(f"cannot split width {a.shape[-1]} into {list(sizes)}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_last(a, start, start + n))
        start += n
    return out


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along axis 0; the gradient scatters back with adds."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _record(table.data[index], (table,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by gamma and shift by beta."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm width {x.shape[-1]} vs gamma {gamma.shape} beta {beta.shape}")
    xd = x.data
    # shifting by the first entry makes constant rows centre to exactly 0
    shift = xd[..., :1]
    centred = xd - shift
    centred = centred - centred.mean(axis=-1, keepdims=True)
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gamma.data

    def fn(g):
        gxhat = g * gd
        n = xd.shape[-1]
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), fn)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _record(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), fn)


def softmax_mean(t: Tensor, b: Tensor) -> Tensor:
    """``f[n,h,i] = sum_j softmax_j(t[n,h,i] * b[n,j]) * b[n,j]``.

    ``t`` has shape (N, H, Lq) and ``b`` (N, Lk).  This is one attention head
    whose queries and keys are scalar multiples of fixed vectors; see
    :mod:`emofm.layers` for how the mixer reduces to it.
    """
    if t.ndim != 3 or b.ndim != 2 or t.shape[0] != b.shape[0] or b.shape[1] < 1:
        raise DimensionError(f"softmax_mean shapes {t.shape} and {b.shape}")
    td = np.ascontiguousarray(t.data)
    bd = np.ascontiguousarray(b.data)
    f = np.empty_like(td)
    z = np.empty_like(td)
    m = np.empty_like(td)
    var = np.empty_like(td)
    _kernels.softmax_mean_forward(td, bd, f, z, m, var)

    def fn(g):
        gt = np.empty_like(td)
        gb = np.empty_like(bd)
        _kernels.softmax_mean_backward(td, bd, np.ascontiguousarray(g), f, z, m, var, gt, gb)
        return gt, gb

    return _record(f, (t, b), fn)


def softmax_mean_weights(t: np.ndarray, b: np.ndarray) -> np.ndarray:
    """The (N, H, Lq, Lk) attention weights behind :func:`softmax_mean`."""
    td = np.ascontiguousarray(t, dtype=np.float64)
    bd = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(td.shape + (bd.shape[1],))
    _kernels.softmax_mean_weights(td, bd, out)
    return out
