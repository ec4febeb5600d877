"""Transformer building blocks shared by the text and joint encoders.

Parameters are plain autograd Tensors registered in a flat
``{dotted.name: Tensor}`` store so checkpoints, the optimizer, and
per-prefix learning-rate multipliers all speak the same names.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1e9  # additive attention mask; underflows to exactly zero weight


class ParamStore:
    """Flat registry of named trainable tensors with seeded initializers."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self._register(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.w = store.normal(f"{name}.w", (d_in, d_out))
        self.b = store.zeros(f"{name}.b", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.w) + self.b


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        self.gain = store.ones(f"{name}.gain", (d,))
        self.shift = store.zeros(f"{name}.shift", (d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.shift, eps=self.eps)


class MultiHeadAttention:
    """Bidirectional self-attention with an additive key mask.

    Masked positions receive exactly zero attention weight (the additive
    NEG_INF underflows through the shifted softmax), so their features
    can never leak into unmasked outputs.
    """

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int):
        if d % n_heads != 0:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = Linear(store, f"{name}.q", d, d)
        self.wk = Linear(store, f"{name}.k", d, d)
        self.wv = Linear(store, f"{name}.v", d, d)
        self.wo = Linear(store, f"{name}.out", d, d)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, key_mask: np.ndarray, collect: bool = False) -> Tensor:
        """x: [B, S, d]; key_mask: [B, S] with 1 = attend, 0 = hide."""
        b, s, d = x.shape

        def split(t: Tensor) -> Tensor:  # [B, S, d] -> [B, H, S, dh]
            return ag.swapaxes(ag.reshape(t, (b, s, self.n_heads, self.d_head)), 1, 2)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d_head))
        bias = np.where(np.asarray(key_mask)[:, None, None, :] > 0, 0.0, NEG_INF)
        weights = ag.softmax(scores + Tensor(bias), axis=-1)
        if collect:
            self.last_weights = weights.data.copy()
        mixed = ag.matmul(weights, v)  # [B, H, S, dh]
        merged = ag.reshape(ag.swapaxes(mixed, 1, 2), (b, s, d))
        return self.wo(merged)


class FeedForward:
    """Position-wise MLP, inner width 4x, GELU."""

    def __init__(self, store: ParamStore, name: str, d: int):
        self.up = Linear(store, f"{name}.up", d, 4 * d)
        self.down = Linear(store, f"{name}.down", 4 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class TransformerLayer:
    """Post-norm encoder layer: LN(x + attn(x)), then LN(x + ffn(x))."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)

    def __call__(self, x: Tensor, key_mask: np.ndarray, collect: bool = False) -> Tensor:
        x = self.norm1(x + self.attn(x, key_mask, collect=collect))
        return self.norm2(x + self.ffn(x))


def masked_mean(features: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of `features` [B, S, d] over positions with mask 1.

    All-pad rows come out as exact zeros (the spec for pooled text).
    """
    mask = np.asarray(mask, dtype=float)
    denom = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    weighted = features * Tensor(mask[..., None])
    return ag.tensor_sum(weighted, axis=-2) * Tensor(1.0 / denom)
