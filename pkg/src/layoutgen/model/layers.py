"""Pre-norm Transformer blocks with explicit boolean attention masks.

Masks are ``(batch, receivers, senders)`` with True meaning "receiver may
read sender". Masked scores are set to -inf before the softmax, so a masked
sender contributes an exact zero.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.d_head).transpose(1, 2)

    def forward(self, xq: torch.Tensor, xkv: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(xq.shape[0], xq.shape[1], -1)
        return self.o(out)


class TransformerLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask, ctx_normed=None):
        h = self.ln1(x)
        kv = h if ctx_normed is None else torch.cat([ctx_normed, h], dim=1)
        x = x + self.drop(self.attn(h, kv, mask))
        return x + self.drop(self.ff(self.ln2(x)))


class Transformer(nn.Module):
    def __init__(self, n_layers: int, d_model: int, heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(d_model, heads, d_ff, dropout) for _ in range(n_layers))
        self.ln = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns final outputs and the normalized inputs of every layer (a KV cache)."""
        cache = []
        for layer in self.layers:
            cache.append(layer.ln1(x))
            x = layer(x, mask)
        return self.ln(x), cache

    def extend(self, cache: list[torch.Tensor], x: torch.Tensor, mask: torch.Tensor):
        """Run extra tokens that read a cached prefix plus themselves.

        ``mask`` is ``(batch, new, prefix + new)``. Prefix tokens never read
        the new ones, so their cached states stay valid.
        """
        new_cache = []
        for layer, ctx in zip(self.layers, cache):
            new_cache.append(torch.cat([ctx, layer.ln1(x)], dim=1))
            x = layer(x, mask, ctx_normed=ctx)
        return self.ln(x), new_cache

    def first_attention(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        layer = self.layers[0]
        h = layer.ln1(x)
        return layer.attn(h, h, mask)


class MLP(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


def causal_mask(valid: torch.Tensor) -> torch.Tensor:
    """``valid`` is (batch, T); padding rows read only themselves."""
    t = valid.shape[1]
    tri = torch.tril(torch.ones(t, t, dtype=torch.bool, device=valid.device))
    m = tri[None] & valid[:, None, :] & valid[:, :, None]
    eye = torch.eye(t, dtype=torch.bool, device=valid.device)[None]
    return m | (eye & ~valid[:, :, None])


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)


def bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))
