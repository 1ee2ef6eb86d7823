"""Dense float64 tensors with taped reverse-mode differentiation.

Covers exactly what small MLP training needs: matrices, vectors and
scalars, an op set for affine layers, softmax heads, normalized
embeddings and contrastive pooling, plus SGD with momentum and a cosine
learning-rate schedule. Every op validates finiteness of its output, so
NaN/Inf poisoning is caught at the op that produced it.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

NORMALIZE_EPS = 1e-12
LOG_CLAMP = 1e-12


class NumericError(RuntimeError):
    """A computation produced or consumed non-finite values."""


class DegenerateEmbeddingError(NumericError):
    """A row had norm below the normalization epsilon."""


class Tensor:
    """Value node of the expression graph: a float64 array plus an adjoint slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """Trainable tensor carrying an SGD momentum buffer."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, data):
        super().__init__(data)
        self.momentum_buffer = np.zeros_like(self.data)


def uniform_init(shape, fan_in, rng) -> Parameter:
    """Uniform[-1/sqrt(fan_in), 1/sqrt(fan_in)] parameter initialization."""
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Tape:
    """Ordered record of the ops applied in a forward pass.

    ``backward`` replays the recorded adjoints exactly once each, in
    reverse order of recording.
    """

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ValueError("backward expects a scalar loss")
        loss.accumulate(np.ones(()))
        for fn in reversed(self._ops):
            fn()


_TAPES: list[Tape] = []


@contextmanager
def recording(tape: Tape):
    """Route op recordings to ``tape`` while the context is active.

    Ops executed outside any recording context compute values only, which
    is how stop-gradient forward passes are run.
    """
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _record(backward_fn) -> None:
    if _TAPES:
        _TAPES[-1].record(backward_fn)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(g)
        b.accumulate(g)

    _record(backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(g)
        b.accumulate(-g)

    _record(backward)
    return out


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(g * c)

    _record(backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    _record(backward)
    return out


def transpose(a) -> Tensor:
    a = _t(a)
    out = Tensor(a.data.T)

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate(g.T)

    _record(backward)
    return out


def affine(x, w, b) -> Tensor:
    """y = x @ w + b for a [n, a] batch, [a, c] weight and [c] bias."""
    x, w, b = _t(x), _t(w), _t(b)
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or x.data.shape[1] != w.data.shape[0]
        or b.data.shape != (w.data.shape[1],)
    ):
        raise ValueError(
            f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}"
        )
    out = Tensor(x.data @ w.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g @ w.data.T)
        w.accumulate(x.data.T @ g)
        b.accumulate(g.sum(axis=0))

    _record(backward)
    return out


def concat_rows(parts) -> Tensor:
    parts = [_t(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]

    def backward():
        g = out.grad
        if g is None:
            return
        offset = 0
        for p, size in zip(parts, sizes):
            p.accumulate(g[offset : offset + size])
            offset += size

    _record(backward)
    return out


def take_rows(x, indices) -> Tensor:
    x = _t(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def backward():
        g = out.grad
        if g is None:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    _record(backward)
    return out


def relu(x) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    x = _t(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g * (x.data > 0.0))

    _record(backward)
    return out


def exp(x) -> Tensor:
    x = _t(x)
    out = Tensor(np.exp(x.data))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g * out.data)

    _record(backward)
    return out


def log_clamped(x, eps: float = LOG_CLAMP) -> Tensor:
    """log(max(x, eps)); the clamped region has zero gradient."""
    x = _t(x)
    out = Tensor(np.log(np.maximum(x.data, eps)))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g * np.where(x.data > eps, 1.0 / np.maximum(x.data, eps), 0.0))

    _record(backward)
    return out


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax with max subtraction; accepts a vector or matrix."""
    x = _t(x)
    squeeze = x.data.ndim == 1
    rows = x.data[None, :] if squeeze else x.data
    if rows.ndim != 2:
        raise ValueError("log_softmax expects a vector or matrix")
    shifted = rows - rows.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(logp[0] if squeeze else logp)

    def backward():
        g = out.grad
        if g is None:
            return
        g2 = g[None, :] if squeeze else g
        p = np.exp(logp)
        gx = g2 - p * g2.sum(axis=1, keepdims=True)
        x.accumulate(gx[0] if squeeze else gx)

    _record(backward)
    return out


def l2_normalize(x, eps: float = NORMALIZE_EPS) -> Tensor:
    """Scale each row to unit Euclidean norm; accepts a vector or matrix."""
    x = _t(x)
    squeeze = x.data.ndim == 1
    rows = x.data[None, :] if squeeze else x.data
    if rows.ndim != 2:
        raise ValueError("l2_normalize expects a vector or matrix")
    with np.errstate(over="ignore"):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise NumericError("row norm overflowed in l2_normalize")
    if norms.min() < eps:
        raise DegenerateEmbeddingError(
            f"row norm {norms.min():.3e} below epsilon {eps:.1e}"
        )
    y = rows / norms
    out = Tensor(y[0] if squeeze else y)

    def backward():
        g = out.grad
        if g is None:
            return
        g2 = g[None, :] if squeeze else g
        gx = (g2 - (g2 * y).sum(axis=1, keepdims=True) * y) / norms
        x.accumulate(gx[0] if squeeze else gx)

    _record(backward)
    return out


def weighted_sum(x, weights) -> Tensor:
    """sum(x * weights) with constant weights; the scalar workhorse for losses."""
    x = _t(x)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.data.shape:
        raise ValueError(f"weighted_sum shape mismatch: {x.shape} vs {w.shape}")
    out = Tensor(np.sum(x.data * w))

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g * w)

    _record(backward)
    return out


def masked_logsumexp_rows(x, mask) -> Tensor:
    """Per-row log-sum-exp over the entries where ``mask`` is True.

    Rows with an all-False mask are rejected: an empty pool view is a
    caller bug, not a representable value.
    """
    x = _t(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.data.shape or x.data.ndim != 2:
        raise ValueError("masked_logsumexp_rows expects matching 2-D shapes")
    if not m.any(axis=1).all():
        raise ValueError("masked_logsumexp_rows: a row has an empty mask")
    neg = np.where(m, x.data, -np.inf)
    rowmax = neg.max(axis=1, keepdims=True)
    sums = np.exp(neg - rowmax).sum(axis=1, keepdims=True)
    out = Tensor((rowmax + np.log(sums))[:, 0])

    def backward():
        g = out.grad
        if g is None:
            return
        p = np.where(m, np.exp(neg - rowmax) / sums, 0.0)
        x.accumulate(g[:, None] * p)

    _record(backward)
    return out


class SgdMomentum:
    """SGD with classical momentum: v <- m*v + g; p <- p - lr*v.

    ``step`` consumes and clears the gradients, so each parameter starts
    the next accumulation from zero.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in optimizer step")
            p.momentum_buffer *= self.momentum
            p.momentum_buffer += g
            p.data -= self.lr * p.momentum_buffer
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at epoch 0 to 0 at epoch total_epochs."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
