"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the operation that produced it.
Calling backward() on a scalar loss walks the graph in reverse
topological order and accumulates gradients into every tensor that
requires them.  Only the operations the encoders and losses need are
implemented; each op states its vector-Jacobian product inline.
"""

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "concat", "take_rows", "take_pairs", "broadcast_to",
    "log_softmax", "softmax", "layer_norm", "l2_normalize", "gelu",
    "bce_with_logits",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    # ---- plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of self w.r.t. every requires_grad leaf."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:  # iterative DFS, graphs can be deep
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- arithmetic ----------------------------------------------------

    @staticmethod
    def _wrap(x, like: np.ndarray) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.dtype))

    def __add__(self, other):
        other = Tensor._wrap(other, self.data)
        a, b = self, other
        out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._wrap(other, self.data)
        a, b = self, other
        out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other, self.data))

    def __rsub__(self, other):
        return Tensor._wrap(other, self.data) + (-self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self):
        a = self
        out = Tensor(1.0 / a.data, a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(-g * out.data * out.data)
        out._backward = back
        return out

    def __matmul__(self, other):
        a, b = self, other
        out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

        def back(g):
            # dA = g @ B^T, dB = A^T @ g, summed over broadcast batch dims.
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = back
        return out

    # ---- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))
        out._backward = back
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inv = np.argsort(axes)
        out = Tensor(a.data.transpose(axes), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))
        out._backward = back
        return out

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        a = self
        out = Tensor(a.data[key], a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)
        out._backward = back
        return out

    # ---- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                     a.requires_grad, (a,))

        def back(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- pointwise -----------------------------------------------------

    def exp(self):
        a = self
        out = Tensor(np.exp(a.data), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g * out.data)
        out._backward = back
        return out

    def log(self):
        a = self
        out = Tensor(np.log(a.data), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g / a.data)
        out._backward = back
        return out

    def sqrt(self):
        a = self
        out = Tensor(np.sqrt(a.data), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g * (0.5 / out.data))
        out._backward = back
        return out

    def tanh(self):
        a = self
        out = Tensor(np.tanh(a.data), a.requires_grad, (a,))

        def back(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out.data * out.data))
        out._backward = back
        return out


# ---- free functions ------------------------------------------------------


def broadcast_to(t: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(t.data, shape), t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            t._accumulate(_unbroadcast(g, t.shape))
    out._backward = back
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    req = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 req, tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)
    out._backward = back
    return out


def take_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding-table lookup)."""
    idx = np.asarray(idx)
    out = Tensor(t.data[idx], t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, idx, g)
            t._accumulate(full)
    out._backward = back
    return out


def take_pairs(t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather t[rows[i], cols[i]] for each i (diagonal / label pick)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(t.data[rows, cols], t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, (rows, cols), g)
            t._accumulate(full)
    out._backward = back
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, t.requires_grad, (t,))

    def back(g):
        # d/dx log_softmax = g - softmax * sum(g)
        if t.requires_grad:
            t._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    out._backward = back
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            t._accumulate(y * (g - dot))
    out._backward = back
    return out


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out = Tensor(y, t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            t._accumulate(inv * (g - gm - y * gy))
    out._backward = back
    return out


def l2_normalize(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    x = t.data
    s = (x * x).sum(axis=-1, keepdims=True)
    n = np.sqrt(s + eps)
    y = x / n
    out = Tensor(y, t.requires_grad, (t,))

    def back(g):
        # y = x (s+eps)^-1/2 ;  dx = g/n - x (x.g) n^-3
        if t.requires_grad:
            xg = (x * g).sum(axis=-1, keepdims=True)
            t._accumulate(g / n - x * (xg / (n * n * n)))
    out._backward = back
    return out


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, t.requires_grad, (t,))

    def back(g):
        if t.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            t._accumulate(g * (cdf + x * pdf))
    out._backward = back
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy over all entries, numerically stable."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    # max(x,0) - x*t + log(1 + exp(-|x|))
    val = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(val.mean(), dtype=x.dtype),
                 logits.requires_grad, (logits,))

    def back(g):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            logits._accumulate(g * (sig - t) / x.size)
    out._backward = back
    return out
