"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient accumulator.
Operations build a graph of parent links and backward closures; calling
``backward()`` on a scalar walks the graph in reverse topological order and
*adds into* each ``grad`` buffer (gradients are never overwritten, so repeated
backward passes accumulate, as stochastic training expects).

Two float widths are supported: float64 for verification (gradient checks,
oracle comparisons) and float32 for training speed.  The module-level default
applies to newly constructed tensors; intermediate results keep the dtype of
their inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "EmptyContextError",
    "EvaluationError",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "log_softmax",
    "softmax",
    "exp",
    "tanh",
    "sigmoid",
    "relu",
    "sqrt",
    "tsum",
    "tmean",
    "gather_rows",
    "take_rows",
    "stop_gradient",
    "attention",
    "grad_check",
]

MASK_FILL = -1e9  # additive mask bias; finite so masked positions keep finite grads


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyContextError(ValueError):
    """Attention was asked to read from zero keys; callers decide pass-through."""


class EvaluationError(ValueError):
    """A function produced a non-finite value where a finite one is required."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


@contextmanager
def no_grad():
    """Disable graph construction (decoding / numeric probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # ---- autodiff engine ------------------------------------------------
    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        flows: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and (node._backward is None or node.grad is not None or not node._parents):
                # leaves always accumulate; interior nodes only if a buffer exists
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    held = flows.get(id(parent))
                    # out-of-place: closures may hand the same array to two parents
                    flows[id(parent)] = pg if held is None else held + pg

    def retain_grad(self) -> "Tensor":
        """Ask backward() to keep this interior node's gradient."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    # ---- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a power")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data**p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda g: (g * (a.data > 0.0),))


def sqrt(a) -> Tensor:
    """Square root with a zero subgradient at 0 (keeps std pooling finite)."""
    a = _as_tensor(a)
    data = np.sqrt(np.maximum(a.data, 0.0))

    def backward(g):
        safe = np.where(data > 0.0, data, 1.0)
        return (np.where(data > 0.0, g * 0.5 / safe, 0.0),)

    return _make(data, (a,), backward)


# ---- shape / indexing -------------------------------------------------------


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    data = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``a`` is (..., m, k) and ``b`` is (k, n), or both 2-d."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects (..., m, k) x (k, n); got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        gb = a2.T @ g2
        return (ga, gb)

    return _make(data, (a, b), backward)


def gather_rows(a, idx) -> Tensor:
    """``out[i] = a[i, idx[i]]`` for a 2-d tensor and integer vector."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows expects (n, m) and (n,); got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(data, (a,), backward)


def take_rows(table, ids) -> Tensor:
    """Row lookup (embedding): ``out[i] = table[ids[i]]`` with scatter-add backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), backward)


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow."""
    return _as_tensor(a).detach()


# ---- softmax family ---------------------------------------------------------


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), backward)


# ---- attention kernel -------------------------------------------------------


def attention(q, k, v, mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """Scaled dot-product attention for one head.

    ``q`` is (Lq, d); ``k`` and ``v`` are (Lk, d) / (Lk, dv).  ``mask`` is an
    optional boolean (Lq, Lk) array where True marks keys a query may read;
    disallowed positions receive an additive ``MASK_FILL`` before the softmax.
    Zero keys raise :class:`EmptyContextError` so callers can choose their own
    pass-through behaviour.
    """
    q = _as_tensor(q)
    k = _as_tensor(k)
    v = _as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects 2-d q/k/v; got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] == 0:
        raise EmptyContextError("attention over zero keys")
    if k.shape[1] != q.shape[1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"key count {k.shape} does not match value count {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = matmul(q, transpose(k)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} does not match scores {(q.shape[0], k.shape[0])}")
        if not mask.any(axis=1).all():
            raise ShapeError("attention mask leaves a query with no visible key")
        bias = np.where(mask, 0.0, MASK_FILL).astype(q.data.dtype)
        scores = scores + Tensor._wrap(bias)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# ---- verification harness ---------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is |analytic - numeric| / max(1, |analytic|);
    the maximum over coordinates is returned.  ``f`` must produce a finite
    scalar at ``x``.
    """
    was_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function value is not finite at x")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(x.data.shape):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            x.data[idx] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
            x.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite probe at index {idx}")
            numeric[idx] = (fp - fm) / (2.0 * h)
    x.requires_grad = was_grad
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
