"""Attention masks for the three Transformer stacks.

All masks are boolean ``[receiver, sender]`` matrices; True lets the
receiver read the sender.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

N_APPENDED = 3


@dataclass(frozen=True)
class GeneratorSlots:
    """Slot layout ``[conds(n_max), ocs(m_max), eoc, z, e, p1, p2, p3]``."""

    n_max: int
    m_max: int

    @property
    def eoc(self) -> int:
        return self.n_max + self.m_max

    @property
    def z(self) -> int:
        return self.eoc + 1

    @property
    def ctx(self) -> int:
        return self.eoc + 2

    @property
    def prefix_len(self) -> int:
        return self.eoc + 3

    @property
    def total(self) -> int:
        return self.prefix_len + N_APPENDED

    def oc(self, q: int) -> int:
        return self.n_max + q


def generator_base_mask(n: int, m: int, org: Sequence[Sequence[int]], slots: GeneratorSlots | None = None) -> torch.Tensor:
    """Static generator mask before any condition is satisfied.

    (a) a condition reads itself and <eoc>; (b) an <oc> reads itself, its
    members and <eoc>; (c) <eoc> reads the whole condition sequence; (d) the
    structure-code token reads itself; (e) the context token reads the
    conditions, <eoc>, the structure code and itself. Appended tokens read
    what the context token reads plus appended tokens up to themselves.
    Padding slots read only themselves.
    """
    s = slots or GeneratorSlots(n, m)
    T = s.total
    mask = torch.zeros(T, T, dtype=torch.bool)
    conds = list(range(n))
    ocs = [s.oc(q) for q in range(m)]
    cond_seq = conds + ocs + [s.eoc]
    for i in conds:
        mask[i, i] = mask[i, s.eoc] = True
    for q, group in enumerate(org):
        r = s.oc(q)
        mask[r, r] = mask[r, s.eoc] = True
        for i in group:
            mask[r, i] = True
    mask[s.eoc, cond_seq] = True
    mask[s.z, s.z] = True
    ctx_view = cond_seq + [s.z, s.ctx]
    mask[s.ctx, ctx_view] = True
    for a in range(N_APPENDED):
        r = s.prefix_len + a
        mask[r, ctx_view] = True
        mask[r, s.prefix_len : r + 1] = True
    for pad in list(range(n, s.n_max)) + [s.oc(q) for q in range(m, s.m_max)]:
        mask[pad, pad] = True
    return mask


def silence(mask: torch.Tensor, silenced: torch.Tensor) -> torch.Tensor:
    """Stop satisfied condition tokens from sending to anyone but themselves.

    ``mask`` is (..., T, T); ``silenced`` is (..., T) over sender slots.
    """
    T = mask.shape[-1]
    eye = torch.eye(T, dtype=torch.bool, device=mask.device)
    return mask & ~(silenced.unsqueeze(-2) & ~eye)


def structure_mask(parents: Sequence[int | None], is_nl: Sequence[bool], length: int | None = None) -> torch.Tensor:
    """Mask over ``[CLS, tokens...]`` for the structure encoder.

    A node's message reaches only itself and its parent, so each node reads
    itself and its children; separators read themselves; the pooling token
    reads everything while nobody reads it.
    """
    L = len(is_nl)
    T = (length if length is not None else L) + 1
    mask = torch.zeros(T, T, dtype=torch.bool)
    mask[0, : L + 1] = True
    for i in range(L):
        mask[i + 1, i + 1] = True
        p = parents[i]
        if not is_nl[i] and p is not None and p >= 0:
            mask[p + 1, i + 1] = True
    for pad in range(L + 1, T):
        mask[pad, pad] = True
    return mask
