"""Structure encoder, context encoder and conditional layout generator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import torch
import torch.nn as nn

from ..core import LayoutError, QuantGrid, TypeVocabulary
from .layers import MLP, Transformer, causal_mask, gaussian_kl
from .masks import N_APPENDED, GeneratorSlots, silence


class EmbeddingError(LayoutError):
    pass


class CapacityError(LayoutError):
    pass


# rows of a node tensor: x, y, w, h, t, b1, b2
N_FIELDS = 7


@dataclass
class ModelConfig:
    d_model: int = 512
    d_ff: int = 2048
    gen_layers: int = 6
    enc_layers: int = 4
    d_z: int = 64
    heads: int = 8
    max_seq: int = 128
    bins_x: int = 64
    bins_y: int = 64
    bins_w: int = 64
    bins_h: int = 64
    n_types: int = 10
    attr_dim: int = 0
    dropout: float = 0.0
    use_local_context: bool = True
    use_global_context: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_z > self.d_model:
            raise ValueError("d_z must not exceed d_model")
        if not self.attr_dim:
            self.attr_dim = max(self.d_model // 4, 2)

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        """Real values per field; each field also reserves one extra index."""
        return (self.bins_x, self.bins_y, self.bins_w, self.bins_h, self.n_types, 2, 2)

    @property
    def mask_index(self) -> tuple[int, ...]:
        return self.vocab_sizes

    @classmethod
    def for_layouts(cls, vocabulary: TypeVocabulary, grid: QuantGrid, **kw) -> "ModelConfig":
        return cls(
            bins_x=grid.bins_x, bins_y=grid.bins_y, bins_w=grid.bins_w, bins_h=grid.bins_h,
            n_types=len(vocabulary), **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class NodeEmbedding(nn.Module):
    """One token per node: per-field lookups, concatenated, then one linear map.

    The extra index of each field is the mask token for x/y/w/h/t and the
    "not applicable" slot for b1/b2.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sizes = cfg.vocab_sizes
        self.tables = nn.ModuleList(nn.Embedding(n + 1, cfg.attr_dim) for n in self.sizes)
        self.proj = nn.Linear(N_FIELDS * cfg.attr_dim, cfg.d_model)

    def check(self, idx: torch.Tensor) -> None:
        if idx.shape[-1] != N_FIELDS:
            raise EmbeddingError(f"expected {N_FIELDS} fields, got {idx.shape[-1]}")
        hi = torch.tensor(self.sizes, device=idx.device)
        if idx.numel() and (bool((idx < 0).any()) or bool((idx > hi).any())):
            raise EmbeddingError("attribute index outside its vocabulary")

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        parts = [table(idx[..., i]) for i, table in enumerate(self.tables)]
        return self.proj(torch.cat(parts, dim=-1))


class LayoutModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = NodeEmbedding(cfg)
        self.nl_token = nn.Parameter(torch.randn(d) * 0.02)
        self.oc_token = nn.Parameter(torch.randn(d) * 0.02)
        self.eoc_token = nn.Parameter(torch.randn(d) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.bos_token = nn.Parameter(torch.zeros(d))

        self.struct_pos = nn.Embedding(cfg.max_seq + 1, d)
        self.struct_enc = Transformer(cfg.enc_layers, d, cfg.heads, cfg.d_ff, cfg.dropout)
        self.to_latent = nn.Linear(d, 2 * cfg.d_z)

        self.fc_parent = nn.Linear(d, d)
        self.fc_sibling = nn.Linear(d, d)
        self.ctx_pos = nn.Embedding(cfg.max_seq + 1, d)
        self.ctx_enc = Transformer(cfg.enc_layers, d, cfg.heads, cfg.d_ff, cfg.dropout)

        self.z_proj = nn.Linear(cfg.d_z, d)
        self.gen_pos = nn.Embedding(cfg.max_seq, d)
        self.generator = Transformer(cfg.gen_layers, d, cfg.heads, cfg.d_ff, cfg.dropout)
        self.head_b34 = MLP(d, d, 2)
        self.to_p1 = MLP(d, d, d)
        self.head_attr = nn.ModuleList(MLP(d, d, n) for n in cfg.vocab_sizes[:5])
        self.head_b12 = MLP(d, d, 2)

    # --- embeddings -----------------------------------------------------------

    def embed_tokens(self, idx: torch.Tensor, is_nl: torch.Tensor) -> torch.Tensor:
        """Node embeddings with separator positions replaced by the NL token."""
        safe = torch.where(is_nl[..., None], torch.zeros_like(idx), idx)
        e = self.embed(safe)
        return torch.where(is_nl[..., None], self.nl_token.expand_as(e), e)

    def embed_node(self, fields_: Sequence[Optional[int]]) -> torch.Tensor:
        """Embed one node ``[x, y, w, h, t, b1, b2]`` or condition ``[x, y, w, h, t]``.

        ``None`` entries use the field's reserved extra index.
        """
        vals = list(fields_) + [None] * (N_FIELDS - len(fields_))
        idx = torch.tensor(
            [self.cfg.mask_index[i] if v is None else int(v) for i, v in enumerate(vals)],
            dtype=torch.long,
        )
        self.embed.check(idx)
        return self.embed(idx)

    # --- structure encoder ------------------------------------------------------

    def encode_structure_batch(self, tok, is_nl, mask, eps=None):
        b, L = is_nl.shape
        if L + 1 > self.cfg.max_seq + 1:
            raise CapacityError(f"structure sequence of {L} tokens exceeds max_seq={self.cfg.max_seq}")
        x = torch.cat([self.cls_token.expand(b, 1, -1), self.embed_tokens(tok, is_nl)], dim=1)
        x = x + self.struct_pos(torch.arange(L + 1, device=x.device))[None]
        out, _ = self.struct_enc(x, mask)
        mean, logvar = self.to_latent(out[:, 0]).chunk(2, dim=-1)
        z = mean if eps is None else mean + torch.exp(0.5 * logvar) * eps
        return z, mean, logvar

    # --- context encoder -----------------------------------------------------------

    def global_context(self, tok, is_nl, valid) -> torch.Tensor:
        """Causal pass over ``[BOS, tokens]``; output k summarizes tokens before k."""
        b, L = is_nl.shape
        if L + 1 > self.cfg.max_seq + 1:
            raise CapacityError(f"sequence of {L} tokens exceeds max_seq={self.cfg.max_seq}")
        x = torch.cat([self.bos_token.expand(b, 1, -1), self.embed_tokens(tok, is_nl)], dim=1)
        x = x + self.ctx_pos(torch.arange(L + 1, device=x.device))[None]
        v = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=x.device), valid], dim=1)
        out, _ = self.ctx_enc(x, causal_mask(v))
        return out

    def context_code(self, parent_emb, has_parent, sibling_emb, has_sibling, f_g):
        """e_k = f_p + f_s + f_g, with absent or switched-off parts contributing zero."""
        zero = torch.zeros_like(f_g)
        if self.cfg.use_local_context:
            f_p = torch.where(has_parent[..., None], self.fc_parent(parent_emb), zero)
            f_s = torch.where(has_sibling[..., None], self.fc_sibling(sibling_emb), zero)
        else:
            f_p = f_s = zero
        if not self.cfg.use_global_context:
            f_g = zero
        return f_p + f_s + f_g, (f_p, f_s, f_g)

    # --- generator -------------------------------------------------------------

    def generator_prefix_tokens(self, cond_emb, n, m, z, slots: GeneratorSlots):
        """Rows ``[conds, ocs, eoc, z, e]`` of the generator input, e left at zero.

        ``cond_emb`` is (B, n_max, d); ``n``/``m`` are (B,) true counts.
        Returns tokens (B, prefix_len, d) and position ids (B, total).
        """
        b = cond_emb.shape[0]
        d = self.cfg.d_model
        if int((n + m).max()) + 3 + N_APPENDED > self.cfg.max_seq:
            raise CapacityError(f"generator input exceeds max_seq={self.cfg.max_seq}")
        x = torch.zeros(b, slots.prefix_len, d, dtype=cond_emb.dtype, device=cond_emb.device)
        x[:, : slots.n_max] = cond_emb
        x[:, slots.n_max : slots.eoc] = self.oc_token
        x[:, slots.eoc] = self.eoc_token
        x[:, slots.z] = self.z_proj(z)
        pos = torch.zeros(b, slots.total, dtype=torch.long, device=cond_emb.device)
        ar_n = torch.arange(slots.n_max, device=cond_emb.device)
        pos[:, : slots.n_max] = torch.where(ar_n[None] < n[:, None], ar_n[None], 0)
        ar_m = torch.arange(slots.m_max, device=cond_emb.device)
        pos[:, slots.n_max : slots.eoc] = torch.where(ar_m[None] < m[:, None], n[:, None] + ar_m[None], 0)
        base = (n + m)[:, None]
        pos[:, slots.eoc :] = base + torch.arange(slots.total - slots.eoc, device=cond_emb.device)[None]
        return x, pos

    def generator_prefix(self, prefix_x, e, pos, mask):
        """Substep-1 pass over S_c. Returns outputs (for r1 and condition features) and the cache."""
        slots_ctx = prefix_x.shape[1] - 1
        x = prefix_x.clone()
        x[:, slots_ctx] = e
        x = x + self.gen_pos(pos[:, : prefix_x.shape[1]])
        return self.generator(x, mask)

    def generator_append(self, cache, tokens, pos, mask):
        """Run appended substep tokens (B, a, d) against a cached S_c pass."""
        return self.generator.extend(cache, tokens + self.gen_pos(pos), mask)

    def selection_logits(self, r2, cond_feats, candidates):
        """Negative squared distances to condition features, scaled by sqrt(d)."""
        dist = (r2[:, None, :] - cond_feats).pow(2).sum(-1) / math.sqrt(self.cfg.d_model)
        return (-dist).masked_fill(~candidates, float("-inf"))

    def attr_logits(self, r3) -> list[torch.Tensor]:
        return [head(r3) for head in self.head_attr]

    def p3_token(self, attrs: torch.Tensor) -> torch.Tensor:
        """Embed predicted ``[x, y, w, h, t]`` with b1/b2 left not-applicable."""
        na = torch.tensor(self.cfg.mask_index[5:], device=attrs.device).expand(attrs.shape[0], 2)
        return self.embed(torch.cat([attrs, na], dim=-1))

    # --- teacher forcing -------------------------------------------------------------

    def forward(self, batch: "TrainBatch") -> dict:
        cfg = self.cfg
        z, mean, logvar = self.encode_structure_batch(batch.struct_tok, batch.struct_nl, batch.struct_mask, batch.eps)
        kl = gaussian_kl(mean, logvar)

        seq_emb = self.embed_tokens(batch.seq_tok, batch.seq_nl)
        ctx_out = self.global_context(batch.seq_tok, batch.seq_nl, batch.seq_valid)
        st, sp = batch.step_tree, batch.step_pos
        f_g = ctx_out[st, sp]
        par = batch.parent_pos.clamp(min=0)
        sib = batch.sibling_pos.clamp(min=0)
        e, _ = self.context_code(
            seq_emb[st, par], batch.parent_pos >= 0, seq_emb[st, sib], batch.sibling_pos >= 0, f_g
        )

        slots = batch.slots
        cond_emb = self.embed(batch.cond_tok)
        prefix_x, pos = self.generator_prefix_tokens(cond_emb, batch.n, batch.m, z, slots)
        mask = silence(batch.base_mask[st], batch.silenced)
        P = slots.prefix_len
        out1, cache = self.generator_prefix(prefix_x[st], e, pos[st], mask[:, :P, :P])
        r1 = out1[:, slots.ctx]
        cond_feats = out1[:, : slots.eoc]

        p1 = self.to_p1(r1)
        sel = batch.sel_target
        if cond_emb.shape[1] == 0:
            p2 = torch.zeros_like(p1)
        else:
            p2 = torch.where((sel >= 0)[:, None], cond_emb[st, sel.clamp(min=0)], torch.zeros_like(p1))
        p3 = self.p3_token(batch.attrs)
        app = torch.stack([p1, p2, p3], dim=1)
        out2, _ = self.generator_append(cache, app, pos[st][:, P:], mask[:, P:, :])
        r2, r3, r4 = out2[:, 0], out2[:, 1], out2[:, 2]

        candidates = batch.cond_valid[st] & ~batch.silenced[:, : slots.eoc]
        return {
            "b34": self.head_b34(r1),
            "sel": self.selection_logits(r2, cond_feats, candidates),
            "attrs": self.attr_logits(r3),
            "b12": self.head_b12(r4),
            "kl": kl,
            "mean": mean,
            "logvar": logvar,
        }


@dataclass
class TrainBatch:
    struct_tok: torch.Tensor
    struct_nl: torch.Tensor
    struct_mask: torch.Tensor
    seq_tok: torch.Tensor
    seq_nl: torch.Tensor
    seq_valid: torch.Tensor
    cond_tok: torch.Tensor
    cond_valid: torch.Tensor
    n: torch.Tensor
    m: torch.Tensor
    base_mask: torch.Tensor
    slots: GeneratorSlots
    step_tree: torch.Tensor
    step_pos: torch.Tensor
    parent_pos: torch.Tensor
    sibling_pos: torch.Tensor
    silenced: torch.Tensor
    sel_target: torch.Tensor
    attrs: torch.Tensor
    b1: torch.Tensor
    b2: torch.Tensor
    b3: torch.Tensor
    b4: torch.Tensor
    is_node: torch.Tensor
    eps: Optional[torch.Tensor] = None
