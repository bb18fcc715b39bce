"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every op builds a new :class:`Tensor`; when any input requires a gradient the
result keeps a reference to its inputs and a backward rule.  :func:`backward`
walks the recorded graph in reverse topological order (the :class:`Tape`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError", "ContractError",
    "tensor", "add", "sub", "neg", "mul", "scale", "div", "matmul", "exp", "log",
    "sqrt", "relu", "max_zero", "sum", "mean", "reshape", "take_rows", "pick",
    "sq_distances", "softmax", "log_softmax", "logsumexp", "clamp_min", "conv2d", "max_pool2d",
    "backward", "zero_grad", "finite_difference_check",
]


class ShapeError(ValueError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op, self.shapes = op, (a, b)


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional node in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _node(data: np.ndarray, inputs: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._inputs = tuple(inputs)
        out._backward = rule
    else:
        out._inputs = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt of negative value (min {a.data.min()!r})")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


max_zero = relu


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is passed only where a > floor."""
    a = tensor(a)
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out, dtype=np.float64), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_rows(a, index) -> Tensor:
    """Rows ``a[index]`` (gather along axis 0, repeats allowed)."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)
    return _node(a.data[index], (a,), rule, "take_rows")


def pick(a, cols) -> Tensor:
    """``a[i, cols[i]]`` for a 2-D tensor; returns a vector."""
    a = tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, cols.shape)
    rows = np.arange(a.shape[0])

    def rule(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)
    return _node(a.data[rows, cols], (a,), rule, "pick")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sq_distances(a, b) -> Tensor:
    """Pairwise squared Euclidean distances between rows: (m, d), (n, d) -> (m, n)."""
    a, b = tensor(a), tensor(b)
    if a.ndim == 1:
        a = reshape(a, (1, -1))
    if b.ndim == 1:
        b = reshape(b, (1, -1))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("sq_distances", a.shape, b.shape)
    # explicit differences: the expanded form loses precision near zero distance
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("mnd,mnd->mn", diff, diff)

    def rule(g):
        gd = 2.0 * g[:, :, None] * diff
        return (gd.sum(axis=1), -gd.sum(axis=0))
    return _node(out, (a, b), rule, "sq_distances")


# -- softmax family ----------------------------------------------------------

def log_softmax(a) -> Tensor:
    a = tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(a) -> Tensor:
    a = tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def logsumexp(a, mask=None) -> Tensor:
    """log(sum(mask * exp(a))) over the last axis, max-shifted.

    Rows whose mask is all zero give -inf.
    """
    a = tensor(a)
    m = np.ones_like(a.data) if mask is None else np.broadcast_to(np.asarray(mask, float), a.shape)
    top = np.where(m > 0, a.data, -np.inf).max(axis=-1, keepdims=True)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(np.where(m > 0, a.data - safe_top, -np.inf))
    total = e.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (np.log(total) + safe_top)[..., 0]
    w = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    return _node(out, (a,), lambda g: (g[..., None] * w,), "logsumexp")


# -- convolution (NHWC) ------------------------------------------------------

def conv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution. x: (B, H, W, Cin), w: (kh, kw, Cin, Cout)."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw, _, cout = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    B, Hp, Wp, _ = xp.shape
    H, W = Hp - kh + 1, Wp - kw + 1
    out = np.zeros((B, H, W, cout))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + H, j:j + W, :] @ w.data[i, j]
    inputs = [x, w]
    if b is not None:
        b = tensor(b)
        out += b.data
        inputs.append(b)

    def rule(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, i:i + H, j:j + W, :]
                gw[i, j] = win.reshape(-1, win.shape[-1]).T @ g2
                gxp[:, i:i + H, j:j + W, :] += g @ w.data[i, j].T
        gx = gxp[:, p:Hp - p, p:Wp - p, :] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads
    return _node(out, inputs, rule, "conv2d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over H and W of an NHWC tensor (floor mode)."""
    x = tensor(x)
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    crop = x.data[:, :Ho * size, :Wo * size, :]
    blocks = crop.reshape(B, Ho, size, Wo, size, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(B, Ho, Wo, C, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, Ho, Wo, C, size, size).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(x.data)
        gx[:, :Ho * size, :Wo * size, :] = gb.reshape(B, Ho * size, Wo * size, C)
        return (gx,)
    return _node(out, (x,), rule, "max_pool2d")


# -- backward ----------------------------------------------------------------

@dataclass
class Tape:
    """Recorded ops reachable from a loss, inputs always before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None and t.requires_grad]


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._inputs, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences, ``|a - n| / max(1e-12, |n|)`` over coordinates."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data.astype(np.float64).copy()
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"f returned non-finite value {out.data}")
    zero_grad([probe])
    backward(out)
    analytic = probe.grad.ravel()
    numeric = np.empty_like(analytic)
    flat = base.ravel()
    for i in range(flat.size):
        vals = []
        for h in (eps, -eps):
            pert = flat.copy()
            pert[i] += h
            v = f(Tensor(pert.reshape(base.shape))).item()
            if not np.isfinite(v):
                raise FloatingPointError(f"f non-finite at coordinate {i}")
            vals.append(v)
        numeric[i] = (vals[0] - vals[1]) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))))
