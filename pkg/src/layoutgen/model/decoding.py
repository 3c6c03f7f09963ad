"""Autoregressive decoding primitives: generation state and the four node substeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from ..conditions import ConditionSet
from ..serde import NL, Replay, SeqNode, Token, TokenSequence
from .masks import N_APPENDED, GeneratorSlots, generator_base_mask, silence
from .network import LayoutModel


class SelectionError(RuntimeError):
    pass


_UNSET = object()


@dataclass
class GenerationState:
    """Bookkeeping for one generation session; never shared across sessions."""

    cond: ConditionSet
    items: list[Token] = field(default_factory=list)
    replay: Replay = field(default_factory=Replay)
    satisfied: list[bool] = field(default_factory=list)
    org_satisfied: list[bool] = field(default_factory=list)
    matched: list[Optional[int]] = field(default_factory=list)
    org_parent: list = field(default_factory=list)
    last_child: dict = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        self.satisfied = [False] * self.cond.n
        self.matched = [None] * self.cond.n
        self.org_satisfied = [False] * self.cond.m
        self.org_parent = [_UNSET] * self.cond.m

    @property
    def emitted(self) -> TokenSequence:
        return TokenSequence(self.items)

    @property
    def n_nodes(self) -> int:
        return sum(1 for t in self.items if t is not NL)

    @property
    def level_closed(self) -> bool:
        """All parents of the current level have received their last child."""
        return not self.replay.queue

    @property
    def finished(self) -> bool:
        r = self.replay
        return r.finished or (bool(self.items) and not r.queue and not r.level_internal)

    @property
    def pending_parent(self) -> Optional[int]:
        return self.replay.queue[0] if self.replay.queue else None

    @property
    def latest_sibling(self) -> Optional[int]:
        if not self.replay.queue:
            return None
        return self.last_child.get(self.replay.queue[0])

    def silenced(self) -> list[bool]:
        return self.satisfied + self.org_satisfied

    def eligible(self, group_restrict: bool = True) -> list[bool]:
        """Attribute conditions selectable for the node about to be emitted."""
        ok = [not s for s in self.satisfied]
        if group_restrict and self.replay.queue:
            here = self.replay.queue[0]
            for q, group in enumerate(self.cond.org):
                established = self.org_parent[q]
                if established is not _UNSET and established != here:
                    for i in group:
                        ok[i] = False
        return ok

    def open_group_members(self) -> set[int]:
        """Unsatisfied members of organization groups anchored at the pending parent."""
        if not self.replay.queue:
            return set()
        here = self.replay.queue[0]
        out: set[int] = set()
        for q, group in enumerate(self.cond.org):
            if self.org_parent[q] is not _UNSET and self.org_parent[q] == here:
                out.update(i for i in group if not self.satisfied[i])
        return out

    def open_group_here(self) -> bool:
        """An organization group is anchored at the pending parent with members left."""
        return bool(self.open_group_members())

    def push(self, tok: Token, cond_index: Optional[int] = None) -> int:
        pos = len(self.items)
        parent = self.pending_parent if tok is not NL else None
        self.replay.feed(pos, tok)
        self.items.append(tok)
        self.steps += 1
        if tok is NL:
            return pos
        self.last_child[parent] = pos
        if cond_index is not None:
            if self.satisfied[cond_index]:
                raise SelectionError(f"condition {cond_index} already satisfied")
            self.satisfied[cond_index] = True
            self.matched[cond_index] = pos
            for q, group in enumerate(self.cond.org):
                if cond_index in group:
                    if self.org_parent[q] is _UNSET:
                        self.org_parent[q] = parent
                    if all(self.satisfied[i] for i in group):
                        self.org_satisfied[q] = True
        return pos


@dataclass
class Session:
    """Condition and structure-code tensors prepared once per generation."""

    cond: ConditionSet
    slots: GeneratorSlots
    prefix_x: torch.Tensor
    pos: torch.Tensor
    base_mask: torch.Tensor
    cond_emb: torch.Tensor
    z: torch.Tensor


def condition_tensor(model: LayoutModel, cond: ConditionSet) -> torch.Tensor:
    mi = model.cfg.mask_index
    rows = [[mi[i] if v is None else v for i, v in enumerate(c.attrs)] + [mi[5], mi[6]] for c in cond.attribute]
    idx = torch.tensor(rows, dtype=torch.long).reshape(len(rows), 7)
    model.embed.check(idx)
    return idx


def prepare_session(model: LayoutModel, cond: ConditionSet, z: torch.Tensor) -> Session:
    slots = GeneratorSlots(cond.n, cond.m)
    idx = condition_tensor(model, cond)
    cond_emb = model.embed(idx)[None]
    n = torch.tensor([cond.n])
    m = torch.tensor([cond.m])
    prefix_x, pos = model.generator_prefix_tokens(cond_emb, n, m, z.reshape(1, -1), slots)
    base = generator_base_mask(cond.n, cond.m, cond.org, slots)[None]
    return Session(cond, slots, prefix_x, pos, base, cond_emb, z.reshape(1, -1))


def _token_tensor(model: LayoutModel, tok: SeqNode) -> torch.Tensor:
    return torch.tensor([[tok.x, tok.y, tok.w, tok.h, tok.t, int(tok.b1), int(tok.b2)]])


def encode_context(model: LayoutModel, state: GenerationState):
    """Context code for the node about to be generated.

    Returns ``(e_k, (f_p, f_s, f_g))``, each of shape (1, d).
    """
    items = state.items
    L = len(items)
    tok = torch.zeros(1, L, 7, dtype=torch.long)
    is_nl = torch.zeros(1, L, dtype=torch.bool)
    for i, t in enumerate(items):
        if t is NL:
            is_nl[0, i] = True
        else:
            tok[0, i] = _token_tensor(model, t)[0]
    out = model.global_context(tok, is_nl, torch.ones(1, L, dtype=torch.bool))
    f_g = out[:, L]
    d = model.cfg.d_model
    par, sib = state.pending_parent, state.latest_sibling
    dt = f_g.dtype
    par_emb = model.embed(tok[:, par]) if par is not None else torch.zeros(1, d, dtype=dt)
    sib_emb = model.embed(tok[:, sib]) if sib is not None else torch.zeros(1, d, dtype=dt)
    return model.context_code(
        par_emb, torch.tensor([par is not None]), sib_emb, torch.tensor([sib is not None]), f_g
    )


@dataclass
class Round:
    """Generator activations for the node currently being produced."""

    mask: torch.Tensor
    out1: torch.Tensor
    cache: list
    r: list = field(default_factory=list)

    @property
    def n_appended(self) -> int:
        return len(self.r) - 1


def generator_forward(model: LayoutModel, sess: Session, e_k: torch.Tensor, state: GenerationState, appended=()):
    """Full-sequence generator pass over ``[S_c, appended...]`` (0 to 3 tokens).

    Returns the output features at every position. Used for probing; the
    decoding loop uses the cached incremental path instead.
    """
    P = sess.slots.prefix_len
    sil = torch.zeros(1, sess.slots.total, dtype=torch.bool)
    sil[0, : sess.cond.n + sess.cond.m] = torch.tensor(state.silenced(), dtype=torch.bool)
    mask = silence(sess.base_mask, sil)
    out1, cache = model.generator_prefix(sess.prefix_x, e_k, sess.pos, mask[:, :P, :P])
    if not appended:
        return out1
    a = len(appended)
    toks = torch.stack(list(appended), dim=1)
    out2, _ = model.generator_append(cache, toks, sess.pos[:, P : P + a], mask[:, P : P + a, : P + a])
    return torch.cat([out1, out2], dim=1)


def decode_substep1(model: LayoutModel, sess: Session, state: GenerationState):
    """Returns the open round, r1 and the (b3, b4) logits."""
    e, _ = encode_context(model, state)
    P = sess.slots.prefix_len
    sil = torch.zeros(1, sess.slots.total, dtype=torch.bool)
    sil[0, : sess.cond.n] = torch.tensor(state.satisfied, dtype=torch.bool)
    sil[0, sess.slots.n_max : sess.slots.eoc] = torch.tensor(state.org_satisfied, dtype=torch.bool)
    mask = silence(sess.base_mask, sil)
    out1, cache = model.generator_prefix(sess.prefix_x, e, sess.pos, mask[:, :P, :P])
    r1 = out1[:, sess.slots.ctx]
    rnd = Round(mask, out1, cache, [r1])
    logits = model.head_b34(r1)[0]
    return rnd, r1, logits


def _append(model: LayoutModel, sess: Session, rnd: Round, token: torch.Tensor) -> torch.Tensor:
    P = sess.slots.prefix_len
    a = rnd.n_appended
    if a >= N_APPENDED:
        raise RuntimeError("round already has all appended tokens")
    out, rnd.cache = model.generator_append(
        rnd.cache, token[:, None], sess.pos[:, P + a : P + a + 1], rnd.mask[:, P + a : P + a + 1, : P + a + 1]
    )
    r = out[:, 0]
    rnd.r.append(r)
    return r


def sample_categorical(logits: torch.Tensor, greedy: bool, temperature: float, top_k: int, gen: torch.Generator) -> int:
    if greedy:
        return int(torch.argmax(logits))
    logits = logits / max(temperature, 1e-6)
    if top_k and top_k < logits.numel():
        kth = torch.topk(logits, top_k).values[-1]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


def sample_binary(logit: torch.Tensor, greedy: bool, temperature: float, gen: torch.Generator) -> bool:
    if greedy:
        return bool(logit > 0)
    p = torch.sigmoid(logit / max(temperature, 1e-6))
    return bool(torch.rand((), generator=gen) < p)


def decode_substep2(model: LayoutModel, sess: Session, rnd: Round, state: GenerationState,
                    greedy=True, temperature=1.0, gen=None, group_restrict=True, only=None):
    """Append p1, compare r2 with condition features and pick a condition.

    Organization tokens are candidates too; picking one resolves to its most
    probable eligible member. ``only`` narrows the attribute candidates.
    Returns ``(r2, attribute-condition index, probs)``.
    """
    r1 = rnd.r[0]
    r2 = _append(model, sess, rnd, model.to_p1(r1))
    n, m = sess.cond.n, sess.cond.m
    eligible = state.eligible(group_restrict)
    if only is not None:
        eligible = [ok and i in only for i, ok in enumerate(eligible)]
    org_ok = [
        not state.org_satisfied[q] and any(eligible[i] for i in g) for q, g in enumerate(sess.cond.org)
    ]
    cand = torch.zeros(1, sess.slots.eoc, dtype=torch.bool)
    cand[0, :n] = torch.tensor(eligible, dtype=torch.bool)
    cand[0, sess.slots.n_max : sess.slots.n_max + m] = torch.tensor(org_ok, dtype=torch.bool)
    if not bool(cand.any()):
        raise SelectionError("no unsatisfied condition is selectable")
    logits = model.selection_logits(r2, rnd.out1[:, : sess.slots.eoc], cand)[0]
    probs = torch.softmax(logits, dim=-1)
    choice = sample_categorical(logits, greedy, temperature, 0, gen)
    if choice >= n:
        group = sess.cond.org[choice - sess.slots.n_max]
        members = [i for i in group if eligible[i]]
        member_logits = model.selection_logits(r2, rnd.out1[:, :n], cand[:, :n])[0]
        choice = max(members, key=lambda i: float(member_logits[i]))
    return r2, choice, probs


def decode_substep3(model: LayoutModel, sess: Session, rnd: Round, selection: Optional[int],
                    greedy=True, temperature=1.0, top_k=0, gen=None, allowed_types=None):
    """Append p2 and read ``[x, y, w, h, t]``; the selected condition's attributes win."""
    if rnd.n_appended == 0:
        _append(model, sess, rnd, model.to_p1(rnd.r[0]))
    if selection is None:
        p2 = torch.zeros(1, model.cfg.d_model, dtype=sess.z.dtype)
    else:
        p2 = sess.cond_emb[:, selection]
    r3 = _append(model, sess, rnd, p2)
    logits = [l[0] for l in model.attr_logits(r3)]
    cond = sess.cond.attribute[selection].attrs if selection is not None else (None,) * 5
    out = []
    for i, (lg, fixed) in enumerate(zip(logits, cond)):
        if fixed is not None:
            out.append(int(fixed))
            continue
        if i == 4 and allowed_types is not None:
            keep = torch.zeros_like(lg, dtype=torch.bool)
            keep[list(allowed_types)] = True
            lg = lg.masked_fill(~keep, float("-inf"))
        out.append(sample_categorical(lg, greedy, temperature, top_k, gen))
    return r3, out, [torch.softmax(l, -1) for l in logits]


def decode_substep4(model: LayoutModel, sess: Session, rnd: Round, attrs):
    """Append p3 (the embedded attributes) and return r4 with the (b1, b2) logits."""
    p3 = model.p3_token(torch.tensor([attrs], dtype=torch.long))
    r4 = _append(model, sess, rnd, p3)
    return r4, model.head_b12(r4)[0]


@dataclass
class StructureCode:
    z: torch.Tensor
    mean: Optional[torch.Tensor] = None
    logvar: Optional[torch.Tensor] = None

    @classmethod
    def from_prior(cls, d_z: int, gen: Optional[torch.Generator] = None) -> "StructureCode":
        return cls(torch.randn(d_z, generator=gen))


def structure_inputs(seq: TokenSequence):
    """Token rows, separator flags and pooling mask for a structure sequence."""
    from ..serde import parent_indices
    from .masks import structure_mask

    parents = parent_indices(seq)
    L = len(seq)
    tok = torch.zeros(1, L, 7, dtype=torch.long)
    is_nl = torch.zeros(1, L, dtype=torch.bool)
    par = []
    for i, t in enumerate(seq):
        if t is NL:
            is_nl[0, i] = True
            par.append(None)
        else:
            tok[0, i] = torch.tensor([t.x, t.y, t.w, t.h, t.t, int(t.b1), int(t.b2)])
            par.append(parents[i])
    return tok, is_nl, structure_mask(par, is_nl[0].tolist())[None]


def encode_structure(model: LayoutModel, struct_seq: TokenSequence, sample: bool = False,
                     gen: Optional[torch.Generator] = None) -> StructureCode:
    """Structure code of a structure sequence; the posterior mean unless ``sample``."""
    tok, is_nl, mask = structure_inputs(struct_seq)
    model.embed.check(tok)
    eps = torch.randn(1, model.cfg.d_z, generator=gen,
                      dtype=next(model.parameters()).dtype) if sample else None
    z, mean, logvar = model.encode_structure_batch(tok, is_nl, mask, eps)
    return StructureCode(z[0], mean[0], logvar[0])
