"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the encoder and the training losses need:
matmul, transpose/reshape, broadcasted arithmetic, exp/log/power, axis
reductions, row-wise softmax/logsumexp, layer normalization, GELU, row
gathering, basic slicing, concatenation, L2 row normalization and masked
fill.  The graph is built implicitly through parent links on each tensor
and replayed exactly once, in reverse topological order, by ``backward``.

All values are kept finite; producing a NaN or Inf anywhere raises
``NumericError`` instead of propagating silently.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class NumericError(Exception):
    """Non-finite values, zero denominators, or a diverging computation."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _recording()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the shape of its source."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array with optional gradient participation."""

    __slots__ = ("data", "grad", "grad_enabled", "_parents", "_backward", "_done")

    def __init__(self, data, grad_enabled: bool = False, _parents=(), _backward=None):
        # asarray(order="C") keeps 0-d shapes (ascontiguousarray would promote to 1-d)
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self.grad = np.zeros_like(arr) if self.grad_enabled else None
        self._parents = tuple(_parents)
        self._backward: Callable[[], None] | None = _backward
        self._done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"

    # -- graph plumbing ------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad_enabled:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every grad-enabled leaf.

        ``self`` must be a scalar produced by a live graph; running
        backward twice on the same output is an error.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not self.grad_enabled:
            raise ValueError("loss is detached from any gradient graph")
        if self._done:
            raise RuntimeError("backward already ran for this loss; rebuild the graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.grad_enabled and id(p) not in seen:
                    stack.append((p, False))

        self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        self._done = True

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _node(self.data + other.data, (self, other))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(out.grad, self.shape))
                other._accum(_unbroadcast(out.grad, other.shape))
            out._backward = _bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        out = _node(self.data - other.data, (self, other))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(out.grad, self.shape))
                other._accum(_unbroadcast(-out.grad, other.shape))
            out._backward = _bwd
        return out

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        out = _node(self.data * other.data, (self, other))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(out.grad * other.data, self.shape))
                other._accum(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = _bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        if np.any(other.data == 0.0):
            raise NumericError("division by zero")
        out = _node(self.data / other.data, (self, other))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(out.grad / other.data, self.shape))
                other._accum(_unbroadcast(-out.grad * self.data / (other.data ** 2), other.shape))
            out._backward = _bwd
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out.grad_enabled:
            def _bwd():
                self._accum(-out.grad)
            out._backward = _bwd
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("power expects a scalar exponent")
        with np.errstate(invalid="ignore", divide="ignore"):
            out = _node(self.data ** p, (self,))
        if out.grad_enabled:
            def _bwd():
                with np.errstate(invalid="ignore", divide="ignore"):
                    self._accum(out.grad * p * self.data ** (p - 1))
            out._backward = _bwd
        return out

    def exp(self):
        with np.errstate(over="ignore"):
            out = _node(np.exp(self.data), (self,))
        if out.grad_enabled:
            def _bwd():
                self._accum(out.grad * out.data)
            out._backward = _bwd
        return out

    def log(self):
        if np.any(self.data <= 0.0):
            raise NumericError("log of a non-positive value")
        out = _node(np.log(self.data), (self,))
        if out.grad_enabled:
            def _bwd():
                self._accum(out.grad / self.data)
            out._backward = _bwd
        return out

    # -- shape ops -----------------------------------------------------

    def __matmul__(self, other):
        other = _wrap(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul requires tensors with at least 2 dimensions")
        if self.shape[-1] != other.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {self.shape} x {other.shape}")
        out = _node(self.data @ other.data, (self, other))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(out.grad @ np.swapaxes(other.data, -1, -2), self.shape))
                other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ out.grad, other.shape))
            out._backward = _bwd
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = _node(np.transpose(self.data, axes), (self,))
        if out.grad_enabled:
            inv = np.argsort(axes) if axes else None
            def _bwd():
                self._accum(np.transpose(out.grad, inv))
            out._backward = _bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out.grad_enabled:
            src = self.shape
            def _bwd():
                self._accum(out.grad.reshape(src))
            out._backward = _bwd
        return out

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))
        if out.grad_enabled:
            def _bwd():
                buf = np.zeros_like(self.data)
                buf[key] += out.grad
                self._accum(buf)
            out._backward = _bwd
        return out

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.grad_enabled:
            def _bwd():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy())
            out._backward = _bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- row-wise nonlinearities ----------------------------------------

    def softmax(self):
        """Softmax over the last axis, with max-subtraction for stability."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        out = _node(y, (self,))
        if out.grad_enabled:
            def _bwd():
                g = out.grad
                self._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))
            out._backward = _bwd
        return out

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        val = m + np.log(s)
        if not keepdims:
            val = np.squeeze(val, axis=axis)
        out = _node(val, (self,))
        if out.grad_enabled:
            soft = e / s
            def _bwd():
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(soft * g)
            out._backward = _bwd
        return out

    def gelu(self):
        """GELU via the tanh approximation; the derivative matches the approximation."""
        x = self.data
        k = 0.7978845608028654  # sqrt(2/pi)
        c = 0.044715
        u = k * (x + c * x ** 3)
        t = np.tanh(u)
        out = _node(0.5 * x * (1.0 + t), (self,))
        if out.grad_enabled:
            def _bwd():
                du = k * (1.0 + 3.0 * c * x ** 2)
                local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
                self._accum(out.grad * local)
            out._backward = _bwd
        return out

    def l2_normalize(self, axis: int = -1):
        """Scale rows (slices along ``axis``) to unit L2 norm."""
        norms = np.sqrt((self.data ** 2).sum(axis=axis, keepdims=True))
        if np.any(norms == 0.0):
            raise NumericError("cannot L2-normalize a zero-norm row")
        y = self.data / norms
        out = _node(y, (self,))
        if out.grad_enabled:
            def _bwd():
                g = out.grad
                self._accum((g - y * (g * y).sum(axis=axis, keepdims=True)) / norms)
            out._backward = _bwd
        return out

    def masked_fill(self, mask: np.ndarray, value: float):
        """Replace entries where ``mask`` is True by ``value`` (no grad there)."""
        mask = np.asarray(mask, dtype=bool)
        out = _node(np.where(mask, value, self.data), (self,))
        if out.grad_enabled:
            def _bwd():
                self._accum(_unbroadcast(np.where(mask, 0.0, out.grad), self.shape))
            out._backward = _bwd
        return out


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents) -> Tensor:
    if _recording() and any(p.grad_enabled for p in parents):
        return Tensor(data, grad_enabled=True, _parents=parents)
    return Tensor(data)


# -- free-standing primitives -----------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.grad_enabled:
        sizes = [t.shape[axis] for t in tensors]
        def _bwd():
            start = 0
            for t, s in zip(tensors, sizes):
                key = [slice(None)] * out.ndim
                key[axis] = slice(start, start + s)
                t._accum(out.grad[tuple(key)])
                start += s
        out._backward = _bwd
    return out


def gather_rows(matrix: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-d matrix; ``ids`` may have any shape."""
    if matrix.ndim != 2:
        raise ValueError("gather_rows expects a 2-d matrix")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[0]):
        raise ValueError("row index out of range")
    out = _node(matrix.data[ids], (matrix,))
    if out.grad_enabled:
        def _bwd():
            buf = np.zeros_like(matrix.data)
            np.add.at(buf, ids.reshape(-1), out.grad.reshape(-1, matrix.shape[1]))
            matrix._accum(buf)
        out._backward = _bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row (last axis) normalization with learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out.grad_enabled:
        def _bwd():
            g = out.grad
            dxhat = g * gain.data
            x._accum(inv * (dxhat
                            - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))
            gain._accum(_unbroadcast(g * xhat, gain.shape))
            bias._accum(_unbroadcast(g, bias.shape))
        out._backward = _bwd
    return out


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities; entry (i, j) = cos(a_i, b_j)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"expected n x d and m x d inputs, got {a.shape} and {b.shape}")
    return a.l2_normalize() @ b.l2_normalize().transpose()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor.  The error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    leaf = Tensor(x.data.copy(), grad_enabled=True)
    loss = f(leaf)
    if loss.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    loss.backward()
    analytic = leaf.grad.copy()

    worst = 0.0
    flat = leaf.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = h
            fp = f(Tensor((flat + bump).reshape(x.shape))).item()
            fm = f(Tensor((flat - bump).reshape(x.shape))).item()
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
