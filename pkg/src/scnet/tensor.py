"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that pushes ``out.grad`` back
into them. ``Tensor.backward`` walks the graph in reverse topological order.
Graph recording is switched off inside :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN/Inf."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req)
        if req:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes don't need to keep their gradient
                if node._parents:
                    node.grad = None

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accum(g)
            other._accum(g)

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accum(g)
            other._accum(-g)

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / other.data**2)

        return Tensor._make(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            if self.requires_grad:
                bb = b if b.ndim > 1 else b[:, None]
                gg = g if b.ndim > 1 else g[..., None]
                self._accum(gg @ np.swapaxes(bb, -1, -2))
            if other.requires_grad:
                aa = a if a.ndim > 1 else a[None, :]
                gg = g if a.ndim > 1 else g[..., None, :]
                if b.ndim == 1:
                    gb = (aa * g[..., None]).reshape(-1, aa.shape[-1]).sum(0)
                elif b.ndim == 2:
                    # shared weight: fold every leading axis into one product
                    gb = aa.reshape(-1, aa.shape[-1]).T @ gg.reshape(-1, gg.shape[-1])
                else:
                    gb = np.swapaxes(aa, -1, -2) @ gg
                other._accum(gb)

        return Tensor._make(a @ b, (self, other), bw)

    # -- shape ops ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: self._accum(g.reshape(old))
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: self._accum(g.transpose(inv))
        )

    def swapaxes(self, a: int, b: int):
        return Tensor._make(
            np.swapaxes(self.data, a, b),
            (self,),
            lambda g: self._accum(np.swapaxes(g, a, b)),
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            raise TypeError("index with numpy arrays, not tensors")
        shape = self.data.shape

        def bw(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            self._accum(full)

        return Tensor._make(self.data[idx], (self,), bw)

    # -- elementwise -------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * out))

    def log(self):
        return Tensor._make(np.log(self.data), (self,), lambda g: self._accum(g / self.data))

    def softplus(self):
        """log(1 + e^x) without overflow or loss of precision near 0."""
        x = self.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return Tensor._make(out, (self,), lambda g: self._accum(g * sig))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * (1.0 - out**2)))

    def clamp_min(self, floor: float):
        keep = self.data >= floor
        return Tensor._make(
            np.where(keep, self.data, floor), (self,), lambda g: self._accum(g * keep)
        )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        a._accum(np.where(cond, g, 0.0))
        b._accum(np.where(cond, 0.0, g))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    t = np.tanh(_GELU_C * d * (1.0 + 0.044715 * (d * d)))
    out = 0.5 * d * (1.0 + t)
    return Tensor._make(out, (x,), lambda g: x._accum(g * _gelu_grad(d, t)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis. Constant rows map to ``beta``."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ValueError(
            f"layer_norm: last axis {D} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, D).sum(0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, D).sum(0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(
                inv
                * (gx - gx.mean(-1, keepdims=True) - xhat * (gx * xhat).mean(-1, keepdims=True))
            )

    return Tensor._make(out, (x, gamma, beta), bw)


def masked_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; fully masked rows give zeros."""
    d = x.data
    if mask is None:
        m = np.ones(d.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    z = np.where(m, d, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(np.where(m, d, 0.0) - zmax), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def bw(g):
        x._accum(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return Tensor._make(p, (x,), bw)


def masked_logsumexp(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) over masked-in entries along ``axis``.

    Rows with no masked-in entry return -inf and pass no gradient.
    """
    d = x.data
    m = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    z = np.where(m, d, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(np.where(m, d, 0.0) - safe), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + safe
    p = e / np.where(s > 0, s, 1.0)

    def bw(g):
        x._accum(p * np.expand_dims(g, axis))

    return Tensor._make(np.squeeze(out, axis=axis), (x,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean sigmoid binary cross-entropy over masked-in elements.

    Uses max(x,0) - x*y + log1p(exp(-|x|)), stable for any finite logit.
    Masked-out elements (which may hold -inf sentinels) contribute nothing.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    y = np.asarray(targets, dtype=DTYPE)
    x = np.where(m, logits.data, 0.0)
    n = max(int(m.sum()), 1)
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    total = np.where(m, per, 0.0).sum() / n

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        logits._accum(np.where(m, (sig - y) * (g / n), 0.0))

    return Tensor._make(np.asarray(total), (logits,), bw)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t
