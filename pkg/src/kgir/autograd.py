"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation applied to tensors that
require gradients records its parents and a backward closure on the
result.  ``Tensor.backward()`` collects the nodes reachable from the
loss, orders them by creation sequence (which is a topological order,
since inputs are always created before outputs), and replays the
closures once each in reverse.

All data lives in float64 numpy arrays.  Gradients accumulate
additively across uses of a tensor, so parameter sharing "just works".
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_seq = itertools.count()


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


def grad_enabled() -> bool:
    """True when operations currently record backward closures."""
    return _grad_mode.enabled


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording (e.g. for evaluation)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_order")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = parents
        self._backward_fn = backward_fn
        self._order = next(_seq)

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient plumbing ---------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DEFAULT_DTYPE)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require gradients")
        nodes = graph_nodes(self)
        self.grad = np.ones_like(self.data)
        for node in nodes:  # reverse execution order
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    # -- method forms of common reductions/shapes -----------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Gradient-relevant nodes reachable from `root`, reverse execution order.

    Creation order is a valid topological order for a define-by-run graph,
    so sorting by it (descending) guarantees every node is visited after
    all of its consumers — each backward closure then runs exactly once.
    """
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order, reverse=True)
    return nodes


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _result(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = _wrap(a)
    p = float(exponent)
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _result(out_data, (a,), backward)


# ---------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-batch semantics.

    Both operands must have ndim >= 2; leading batch dimensions broadcast.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(out_data, (a,), backward)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _wrap(a)
    out_data = np.swapaxes(a.data, axis1, axis2)

    def backward(g):
        a._accumulate(np.swapaxes(g, axis1, axis2))

    return _result(out_data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = np.broadcast_to(a.data, shape)

    def backward(g):
        a._accumulate(g)  # _accumulate unbroadcasts

    return _result(np.array(out_data), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return _result(out_data, tuple(tensors), backward)


def take(a, index) -> Tensor:
    """Basic slicing/indexing with gradient scatter-add."""
    a = _wrap(a)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(np.array(out_data), (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: table [V, d] gathered by an integer id array."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return _result(out_data, (table,), backward)


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _result(out_data, (a,), backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _result(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _result(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        a._accumulate(g * mask)

    return _result(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact Gaussian-error GELU: x * Phi(x)."""
    a = _wrap(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        a._accumulate(g * (cdf + a.data * pdf))

    return _result(out_data, (a,), backward)


# ---------------------------------------------------------------------
# fused numerically-careful ops
# ---------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stabilised softmax along `axis`; rows sum to one."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _result(out_data, (a,), backward)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine.

    Variance is the biased (divide-by-d) estimate.  Composed from
    primitive ops, so the backward pass needs no bespoke derivation.
    """
    x = _wrap(x)
    mu = tensor_mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = tensor_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), gain), shift)


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise binary cross-entropy on raw logits.

    Stable for large |z|: max(z, 0) - z*y + log1p(exp(-|z|)).
    Labels are treated as constants.
    """
    logits = _wrap(logits)
    z = logits.data
    y = np.asarray(labels, dtype=DEFAULT_DTYPE)
    out_data = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        logits._accumulate(g * (_sigmoid(z) - y))

    return _result(out_data, (logits,), backward)


def cross_entropy(logits, targets, score_mask=None) -> Tensor:
    """Mean token-level cross-entropy over the positions with score_mask=1.

    logits: [n, V]; targets: [n] integer class ids; score_mask: [n] in {0,1}
    (defaults to all ones).  If no position is scored the loss is a
    constant zero and contributes no gradient.
    """
    logits = _wrap(logits)
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, V] logits, got {z.shape}")
    n, v = z.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy target id outside [0, {v})")
    mask = np.ones(n) if score_mask is None else np.asarray(score_mask, dtype=DEFAULT_DTYPE)
    n_scored = mask.sum()
    if n_scored == 0:
        return Tensor(0.0)

    shifted = z - z.max(axis=1, keepdims=True)
    log_denom = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[np.arange(n), targets] - log_denom
    out_data = -(log_probs * mask).sum() / n_scored

    def backward(g):
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        probs[np.arange(n), targets] -= 1.0
        logits._accumulate(g * probs * (mask / n_scored)[:, None])

    return _result(out_data, (logits,), backward)
