"""Causal multi-head self-attention and pre-norm transformer blocks.

Inputs are (B, L, E) token streams with a (B, L) boolean ``valid`` mask.
A query may attend to key ``j`` only if ``j`` is not in its future and is
a valid token; every position may always attend to itself, so padded
queries stay well-defined without ever leaking into valid positions.
"""
from __future__ import annotations

import numpy as np

from .layers import LayerNorm, Linear, Module
from .mlp import Mlp


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, L) valid flags -> (B, 1, L, L) boolean allowed[b, 0, query, key]."""
    B, L = valid.shape
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & valid[:, None, :]
    allowed |= np.eye(L, dtype=bool)[None]
    return allowed[:, None]


class CausalSelfAttention(Module):
    def __init__(self, embed_dim: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        if embed_dim % num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        self.E, self.H = embed_dim, num_heads
        self.dh = embed_dim // num_heads
        self.qkv = Linear(embed_dim, 3 * embed_dim, rng)
        self.proj = Linear(embed_dim, embed_dim, rng)
        self.children.update(qkv=self.qkv, proj=self.proj)
        self._cache = None

    def _split(self, t):
        B, L, _ = t.shape
        return t.reshape(B, L, self.H, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, t):
        B, H, L, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def _attend(self, qkv, valid):
        q, k, v = (self._split(t) for t in np.split(qkv, 3, axis=-1))
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.dh)
        allowed = attention_mask(valid)
        scores = np.where(allowed, scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        return q, k, v, att, self._merge(att @ v)

    def predict(self, x, valid):
        *_, out = self._attend(self.qkv.predict(x), valid)
        return self.proj.predict(out)

    def forward(self, x, valid):
        q, k, v, att, out = self._attend(self.qkv.forward(x), valid)
        self._cache = (q, k, v, att)
        return self.proj.forward(out)

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("attention backward called without a cached forward pass")
        q, k, v, att = self._cache
        g_out = self._split(self.proj.backward(g))
        g_att = g_out @ v.transpose(0, 1, 3, 2)
        g_v = att.transpose(0, 1, 3, 2) @ g_out
        g_scores = att * (g_att - (g_att * att).sum(axis=-1, keepdims=True))
        g_scores /= np.sqrt(self.dh)
        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 1, 3, 2) @ q
        g_qkv = np.concatenate([self._merge(g_q), self._merge(g_k), self._merge(g_v)], axis=-1)
        return self.qkv.backward(g_qkv)


class TransformerBlock(Module):
    """x + attn(ln(x)), then + mlp(ln(.)); relu feed-forward of width ``mlp_ratio * E``."""

    def __init__(self, embed_dim: int, num_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(embed_dim)
        self.attn = CausalSelfAttention(embed_dim, num_heads, rng)
        self.ln2 = LayerNorm(embed_dim)
        self.mlp = Mlp([embed_dim, mlp_ratio * embed_dim, embed_dim], "relu", seed=rng)
        self.children.update(ln1=self.ln1, attn=self.attn, ln2=self.ln2, mlp=self.mlp)

    def predict(self, x, valid):
        h = x + self.attn.predict(self.ln1.predict(x), valid)
        return h + self.mlp.predict(self.ln2.predict(h))

    def forward(self, x, valid):
        h = x + self.attn.forward(self.ln1.forward(x), valid)
        return h + self.mlp.forward(self.ln2.forward(h))

    def backward(self, g):
        g_h = g + self.ln2.backward(self.mlp.backward(g))
        return g_h + self.ln1.backward(self.attn.backward(g_h))
