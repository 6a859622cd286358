"""Permutation-invariant set encoders.

A stack of attention blocks turns each plate of exchangeable draws into a
fixed-size summary vector, so downstream conditioning never sees the plate
cardinality. One encoder tower per plate: tower h pools the h-th innermost
plate of the observed data, leaving per-branch summaries of width d_enc.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .module import LayerNorm, Linear, Module
from .tensor import Tensor


# initial scale of the key projection relative to a standard linear layer;
# small keys flatten the attention logits, so every block starts out close
# to mean pooling and only sharpens its routing as the keys grow
KEY_SHRINK = 0.1


def _split_heads(x, n_heads):
    """(..., S, D) -> (..., heads, S, D/heads) via channel slicing."""
    shape = x.data.shape
    head = shape[-1] // n_heads
    parts = []
    for i in range(n_heads):
        p = T.narrow(x, -1, i * head, head)
        parts.append(T.reshape(p, shape[:-2] + (1,) + shape[-2:-1] + (head,)))
    return T.concat(parts, axis=-3)


def _merge_heads(x):
    """(..., heads, S, Dh) -> (..., S, heads*Dh)."""
    shape = x.data.shape
    n_heads, s, dh = shape[-3], shape[-2], shape[-1]
    parts = []
    for i in range(n_heads):
        p = T.narrow(x, -3, i, 1)
        parts.append(T.reshape(p, shape[:-3] + (s, dh)))
    return T.concat(parts, axis=-1)


class AttentionBlock(Module):
    """Queries attend to a key set, residual + layer norm twice over.

    The query projection doubles as the residual branch, so the block also
    maps d_q inputs up to d_model.
    """

    def __init__(self, d_q, d_k, d_model, n_heads, rng):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_model = d_model
        self.fc_q = Linear(d_q, d_model, rng)
        self.fc_k = Linear(d_k, d_model, rng)
        self.fc_k.weight.data *= KEY_SHRINK
        self.fc_v = Linear(d_k, d_model, rng)
        self.fc_o = Linear(d_model, d_model, rng)
        self.ln0 = LayerNorm(d_model)
        self.ln1 = LayerNorm(d_model)

    def __call__(self, q, k):
        qp = self.fc_q(q)
        qh = _split_heads(qp, self.n_heads)
        kh = _split_heads(self.fc_k(k), self.n_heads)
        vh = _split_heads(self.fc_v(k), self.n_heads)
        logits = T.matmul(qh, T.swap_last2(kh)) * (1.0 / np.sqrt(self.d_model // self.n_heads))
        att = T.matmul(T.softmax(logits), vh)
        h = self.ln0(qp + _merge_heads(att))
        return self.ln1(h + T.relu(self.fc_o(h)))


class SelfAttentionBlock(Module):
    def __init__(self, d_in, d_model, n_heads, rng):
        self.block = AttentionBlock(d_in, d_in, d_model, n_heads, rng)

    def __call__(self, x):
        return self.block(x, x)


class InducedAttentionBlock(Module):
    """Attention routed through a small learned set of inducing points, so
    cost stays linear in the input set size."""

    def __init__(self, d_in, d_model, n_heads, n_inducing, rng):
        bound = np.sqrt(6.0 / (n_inducing + d_model))
        self.inducing = Tensor(rng.uniform(-bound, bound, size=(n_inducing, d_model)),
                               requires_grad=True)
        self.to_inducing = AttentionBlock(d_model, d_in, d_model, n_heads, rng)
        self.from_inducing = AttentionBlock(d_in, d_model, d_model, n_heads, rng)

    def __call__(self, x):
        h = self.to_inducing(self.inducing, x)
        return self.from_inducing(x, h)


class PoolingBlock(Module):
    """Pool a set down to one vector: a learned seed attends to rFF(x)."""

    def __init__(self, d_model, n_heads, rng):
        bound = np.sqrt(6.0 / (1 + d_model))
        self.seed = Tensor(rng.uniform(-bound, bound, size=(1, d_model)),
                           requires_grad=True)
        self.rff = Linear(d_model, d_model, rng)
        self.block = AttentionBlock(d_model, d_model, d_model, n_heads, rng)

    def __call__(self, x):
        return self.block(self.seed, T.relu(self.rff(x)))


class SetTransformer(Module):
    """Set of vectors in, one vector out, invariant to input order.

    Layout: two induced blocks, pool to a single seed, one self-attention
    block, linear head. Arbitrary leading batch axes pass straight through.
    """

    def __init__(self, d_in, d_enc, rng, n_heads=2, n_inducing=8):
        self.isab0 = InducedAttentionBlock(d_in, d_enc, n_heads, n_inducing, rng)
        self.isab1 = InducedAttentionBlock(d_enc, d_enc, n_heads, n_inducing, rng)
        self.pool = PoolingBlock(d_enc, n_heads, rng)
        self.sab = SelfAttentionBlock(d_enc, d_enc, n_heads, rng)
        self.head = Linear(d_enc, d_enc, rng)
        self.d_enc = d_enc

    def __call__(self, x):
        """x: (..., S, d_in) -> (..., d_enc)."""
        h = self.isab1(self.isab0(x))
        h = self.head(self.sab(self.pool(h)))
        shape = h.data.shape
        return T.reshape(h, shape[:-2] + (shape[-1],))


class HierarchicalEncoder(Module):
    """One summary per hierarchy level of the observed plate structure.

    Tower 1 pools the innermost plate of x, handing per-branch vectors to
    tower 2, and so on; after P towers every plate axis is gone. encode
    returns {1: E_1, ..., P: E_P} where E_h keeps the cardinalities of the
    plates not yet pooled, plus a trailing (d_enc,).
    """

    def __init__(self, n_plates, d_obs, d_enc, rng, n_heads=2, n_inducing=8):
        if n_plates < 1:
            raise ConfigError("need at least one plate of observed draws")
        towers = [SetTransformer(d_obs, d_enc, rng,
                                 n_heads=n_heads, n_inducing=n_inducing)]
        for _ in range(n_plates - 1):
            towers.append(SetTransformer(d_enc, d_enc, rng,
                                         n_heads=n_heads, n_inducing=n_inducing))
        self.towers = towers
        self.n_plates = n_plates
        self.d_enc = d_enc

    def encode(self, x):
        """x: (..., C_P, ..., C_1, d_obs) -> {h: E_h}, innermost plate first."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        out = {}
        h = x
        for level, tower in enumerate(self.towers, start=1):
            h = tower(h)
            out[level] = h
        return out
