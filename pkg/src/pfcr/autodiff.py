"""Small reverse-mode autodiff engine over numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how frozen full-precision targets are produced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "layernorm",
    "softmax",
    "gelu",
    "ste_round",
    "clamp",
    "mse_loss",
    "cross_entropy",
]


class Tensor:
    """Dense array plus gradient bookkeeping.

    ``data`` keeps whatever floating dtype it was built with; every op
    preserves its input dtype so float64 gradient checks exercise the same
    code as float32 training.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape | None"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside record nodes in execution
    order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


class no_grad:
    """Suspend recording inside an enclosing tape."""

    def __enter__(self):
        _ACTIVE.append(None)

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and _ACTIVE[-1] is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _ACTIVE[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaves that appear on the tape but receive no gradient get zeros.
    Repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._leaf and loss.requires_grad:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + 1.0
        return
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        in_grads = node.vjp(g) if g is not None else (None,) * len(node.inputs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t._leaf:
                if gi is None:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    continue
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif gi is not None:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


# linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy matmul semantics (batched over leading dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` where ``w`` is stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# network primitives ----------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the affine transform."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError(f"layernorm width mismatch: {x.shape} vs {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _record(xhat * gd + beta.data, (x, gamma, beta), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _record(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _record(out, (x,), vjp)


def ste_round(x: Tensor) -> Tensor:
    """Round half to even; identity Jacobian in the backward pass."""
    return _record(np.round(x.data), (x,), lambda g: (g,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes only strictly inside ``[lo, hi]``."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; ``b`` is treated as a constant target."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def vjp(g):
        ga = g * (2.0 / n) * diff
        return ga, (-ga if b.requires_grad else None)

    return _record(out, (a, b), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer labels over the last axis."""
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = ld.shape[0]
    idx = np.arange(n)
    out = np.asarray(-logp[idx, labels].mean(), dtype=ld.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[idx, labels] -= 1.0
        return (g * p / n,)

    return _record(out, (logits,), vjp)
