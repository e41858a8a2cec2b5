"""Small reverse-mode autodiff over 2-D float64 arrays, plus Adam.

Every value is a ``Tensor`` holding a ``(rows, cols)`` numpy array. Ops build a
graph of parents and backward closures; ``backward`` walks it in reverse
topological order and then releases it, so each forward graph can be
differentiated once.

The left operand of ``matmul`` may also be a constant ``scipy.sparse`` matrix,
which is how batched block-diagonal subgraph adjacencies are applied.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        _check_finite(arr, name or "tensor input")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the few ops that read naturally
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


class Param(Tensor):
    """Trainable tensor carrying its own Adam state."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def copy_from(self, other: Param) -> None:
        if other.shape != self.shape:
            raise ShapeError(f"cannot copy {other.shape} into {self.shape}")
        self.value = other.value.copy()


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward, what: str) -> Tensor:
    _check_finite(value, what)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b: Tensor) -> Tensor:
    if sp.issparse(a):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        A = a.tocsr()

        def back(g):
            _accum(b, A.T @ g)

        return _make(np.asarray(A @ b.value), (b,), back, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T)
        if b.requires_grad:
            _accum(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
    if a.shape == b.shape:
        def back(g):
            _accum(a, g)
            _accum(b, g)

        return _make(a.value + b.value, (a, b), back, "add")
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        def back(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0, keepdims=True))

        return _make(a.value + b.value, (a, b), back, "add")
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def back(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _make(a.value * b.value, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        _accum(a, c * g)

    return _make(a.value * c, (a,), back, "scale")


def transpose(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g.T)

    return _make(a.value.T.copy(), (a,), back, "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def back(g):
        _accum(a, g * mask)

    return _make(a.value * mask, (a,), back, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.value > 0, 1.0, slope)

    def back(g):
        _accum(a, g * factor)

    return _make(a.value * factor, (a,), back, "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)

    def back(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), back, "sigmoid")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax. Entries where ``mask`` is False get probability 0."""
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} vs {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row has no admissible entry")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        _accum(a, p * (g - inner))

    return _make(p, (a,), back, "softmax_rows")


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    if n == 0:
        raise ShapeError("mean_rows of an empty tensor")

    def back(g):
        _accum(a, np.repeat(g / n, n, axis=0))

    return _make(a.value.mean(axis=0, keepdims=True), (a,), back, "mean_rows")


def row_concat(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("row_concat of nothing")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"row_concat: column mismatch {p.shape[1]} vs {cols}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[lo:hi])

    return _make(np.vstack([p.value for p in parts]), parts, back, "row_concat")


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.value[idx], (a,), back, "take_rows")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product: (r, c), (r, c) -> (r, 1)."""
    _same_shape(a, b, "dot")

    def back(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _make((a.value * b.value).sum(axis=1, keepdims=True), (a, b), back, "dot")


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Per-row binary cross-entropy on logits; labels are constants in {0, 1}."""
    y = np.asarray(label, dtype=np.float64).reshape(logit.shape)
    x = logit.value
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        _accum(logit, g * (_sigmoid(x) - y))

    return _make(loss, (logit,), back, "bce_with_logits")


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, np.full_like(a.value, g[0, 0]))

    return _make(a.value.sum().reshape(1, 1), (a,), back, "sum")


def sum_squares(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, 2.0 * g[0, 0] * a.value)

    return _make(np.sum(a.value ** 2).reshape(1, 1), (a,), back, "sum_squares")


def sqrt(a: Tensor) -> Tensor:
    if (a.value <= 0).any():
        raise FloatingPointError("sqrt needs strictly positive input")
    s = np.sqrt(a.value)

    def back(g):
        _accum(a, g * 0.5 / s)

    return _make(s, (a,), back, "sqrt")


def add_all(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# backward and optimizer


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Param.grad``."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran on this graph; run the forward pass again")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not isinstance(node, Param):
            node.grad = None
        # release the tape as we go
        node._backward = None
        node._parents = ()


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))
