"""Inference harness: decoding loop, the seven tasks and output repair."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, NamedTuple, Optional

import torch

from .conditions import Condition, ConditionSet, InvalidTask, TaskKind
from .core import LayoutError, LayoutTree, QuantGrid, TypeVocabulary, tree_from_json, validate_tree
from .model.decoding import (
    GenerationState,
    StructureCode,
    decode_substep1,
    decode_substep2,
    decode_substep3,
    decode_substep4,
    encode_structure,
    prepare_session,
    sample_binary,
)
from .model.network import LayoutModel
from .serde import NL, SeqNode, Token, TokenSequence, deserialize, extract_structure_sequence, parent_indices, serialize

STRUCTEXTR_ROUNDS = 3


class EmptyGeneration(LayoutError):
    pass


class TruncatedGeneration(LayoutError):
    def __init__(self, result: "GenerationResult"):
        super().__init__(f"generation hit the length limit after {len(result.sequence)} tokens")
        self.result = result


class ModelBundle(NamedTuple):
    model: LayoutModel
    vocabulary: TypeVocabulary
    grid: QuantGrid

    @classmethod
    def load(cls, path) -> "ModelBundle":
        from .training import load_checkpoint

        return cls(*load_checkpoint(path))


@dataclass(frozen=True)
class DecodeOptions:
    mode: str = "greedy"
    temperature: float = 1.0
    top_k: int = 5
    seed: int = 0
    max_nodes: int = 30
    max_depth: Optional[int] = 5
    # keep the final sibling group open while selectable conditions remain
    hold_for_conditions: bool = True
    # raise TruncatedGeneration instead of returning a flagged result
    strict: bool = False

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"decode mode must be 'greedy' or 'sample', not {self.mode!r}")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be at least 1")

    @property
    def greedy(self) -> bool:
        return self.mode == "greedy"

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "DecodeOptions":
        known = {k: d[k] for k in ("mode", "temperature", "top_k", "seed", "max_nodes", "max_depth", "hold_for_conditions") if k in d}
        known.update(overrides)
        return cls(**known)


@dataclass
class SatisfactionEntry:
    index: int
    satisfied: bool
    position: Optional[int] = None
    path: Optional[tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {
            "condition": self.index,
            "satisfied": self.satisfied,
            "position": self.position,
            "path": None if self.path is None else list(self.path),
        }


@dataclass
class GenerationResult:
    sequence: TokenSequence
    tree: LayoutTree
    conditions: ConditionSet
    report: list[SatisfactionEntry]
    z: torch.Tensor
    truncated: bool = False
    malformed: bool = False
    repair_log: list[str] = field(default_factory=list)

    @property
    def n_satisfied(self) -> int:
        return sum(e.satisfied for e in self.report)

    @property
    def satisfaction_rate(self) -> float:
        return self.n_satisfied / len(self.report) if self.report else 1.0

    @property
    def all_satisfied(self) -> bool:
        return all(e.satisfied for e in self.report)

    def org_parents(self) -> list[Optional[set]]:
        """Parent positions of each organization group's members; None when a member is unmatched."""
        parents = parent_indices(self.sequence)
        out = []
        for group in self.conditions.org:
            if all(self.report[i].satisfied for i in group):
                out.append({parents[self.report[i].position] for i in group})
            else:
                out.append(None)
        return out

    def report_dict(self) -> dict:
        return {
            "conditions": [e.to_dict() for e in self.report],
            "satisfied": self.n_satisfied,
            "total": len(self.report),
            "truncated": self.truncated,
            "malformed": self.malformed,
            "repair_log": list(self.repair_log),
        }


# --- repair -------------------------------------------------------------------


class Repaired(NamedTuple):
    sequence: TokenSequence
    log: list[str]
    # input position -> output position for every surviving node
    index_map: dict[int, int]


def repair_sequence(seq) -> Repaired:
    """Make a possibly malformed sequence valid with minimal edits.

    Open parent groups get ``b2`` on their final child, parents that never
    received children become leaves, orphan nodes and stray separators are
    dropped. A valid input comes back unchanged with an empty log.
    """
    items = list(seq)
    out: list[Token] = []
    log: list[str] = []
    index_map: dict[int, int] = {}
    queue: list[Optional[int]] = [None]
    level_internal: list[int] = []
    last_child: dict[Optional[int], int] = {}

    def set_flag(pos: int, **flags) -> None:
        out[pos] = replace(out[pos], **flags)

    def close_level() -> None:
        for parent in queue:
            if parent in last_child:
                child = last_child[parent]
                set_flag(child, b2=True)
                log.append(f"set last-child flag on node {child}")
            elif parent is not None:
                set_flag(parent, b1=True)
                log.append(f"node {parent} received no children; marked as leaf")
        queue.clear()

    for pos, tok in enumerate(items):
        if tok is NL:
            if not any(t is not NL for t in out):
                log.append(f"dropped separator at {pos} before the root")
                continue
            if out and out[-1] is NL:
                log.append(f"dropped repeated separator at {pos}")
                continue
            if queue:
                close_level()
            if not level_internal:
                rest = len(items) - pos - 1
                if rest:
                    log.append(f"dropped {rest} token(s) after the final level")
                break
            queue[:] = level_internal
            level_internal = []
            out.append(NL)
            continue
        if not queue:
            log.append(f"dropped orphan node at {pos}")
            continue
        parent = queue[0]
        if parent is None and not tok.b2:
            tok = replace(tok, b2=True)
            log.append("set last-child flag on the root")
        new = len(out)
        out.append(tok)
        index_map[pos] = new
        last_child[parent] = new
        if not tok.b1:
            level_internal.append(new)
        if tok.b2:
            queue.pop(0)
    if not index_map:
        raise EmptyGeneration("sequence holds no usable node")
    if queue:
        close_level()
    for p in level_internal:
        set_flag(p, b1=True)
        log.append(f"node {p} received no children; marked as leaf")
    while out and out[-1] is NL:
        out.pop()
        log.append("dropped trailing separator")
    return Repaired(TokenSequence(out), log, index_map)


# --- decoding -----------------------------------------------------------------


def _min_future_nodes(state: GenerationState) -> int:
    """Nodes still owed: one child per open parent beyond the current one and per pending internal node."""
    r = state.replay
    return max(len(r.queue) - 1, 0) + len(r.level_internal)


def _closes_layout(state: GenerationState) -> bool:
    """Closing the pending parent now would leave nothing more to generate."""
    r = state.replay
    return len(r.queue) == 1 and not r.level_internal


def _group_incomplete(state: GenerationState, selection: Optional[int]) -> bool:
    """Closing now would strand members of a group anchored here (or anchored by this node)."""
    left = state.open_group_members()
    if selection is not None:
        for group in state.cond.org:
            if selection in group:
                left.update(i for i in group if not state.satisfied[i])
        left.discard(selection)
    return bool(left)


def _root_candidates(cond: ConditionSet, vocab: TypeVocabulary) -> set[int]:
    """Conditions the root may satisfy while others still need room below it."""
    grouped = {i for g in cond.org for i in g}
    return {
        i for i, c in enumerate(cond.attribute)
        if i not in grouped and (c.t is None or vocab.is_internal(c.t))
    }


def _waiting(state: GenerationState, selection: Optional[int]) -> bool:
    return any(ok and i != selection for i, ok in enumerate(state.eligible()))


def _paths(seq: TokenSequence) -> dict[int, tuple[int, ...]]:
    parents = parent_indices(seq)
    paths: dict[int, tuple[int, ...]] = {}
    counts: dict[int, int] = {}
    for pos in sorted(parents):
        p = parents[pos]
        if p is None:
            paths[pos] = ()
        else:
            k = counts.get(p, 0)
            counts[p] = k + 1
            paths[pos] = paths[p] + (k,)
    return paths


def generate(cond: ConditionSet, z: StructureCode | torch.Tensor, bundle: ModelBundle,
             options: DecodeOptions = DecodeOptions()) -> GenerationResult:
    """Decode one layout under ``cond`` and structure code ``z``.

    Structural flags are masked to the moves the sequence grammar allows: a
    separator is emitted exactly when every parent of the level is closed, and
    generation stops once a level ends without internal nodes.
    """
    model, vocab, grid = bundle
    zt = z.z if isinstance(z, StructureCode) else z
    gen = torch.Generator().manual_seed(int(options.seed))
    greedy, temp = options.greedy, options.temperature
    leaf_types = vocab.leaf_types()
    budget = min(options.max_nodes, model.cfg.max_seq)
    truncated = False
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            sess = prepare_session(model, cond, zt)
            state = GenerationState(cond)
            overflow = False
            while not state.finished:
                if len(state.items) >= model.cfg.max_seq:
                    truncated = True
                    break
                if state.level_closed:
                    state.push(NL)
                    continue
                if state.n_nodes >= budget:
                    truncated = True
                    break
                rnd, _, lg34 = decode_substep1(model, sess, state)
                at_root = state.pending_parent is None
                only = _root_candidates(cond, vocab) if at_root and options.hold_for_conditions and cond.n > 1 else None
                eligible = any(ok and (only is None or i in only) for i, ok in enumerate(state.eligible()))
                pending_group = state.open_group_members()
                selection = None
                if pending_group:
                    # the anchored group's remaining members must land under this parent
                    _, selection, _ = decode_substep2(model, sess, rnd, state, greedy, temp, gen,
                                                      only=pending_group)
                elif eligible and (overflow or sample_binary(lg34[1], greedy, temp, gen)):
                    _, selection, _ = decode_substep2(model, sess, rnd, state, greedy, temp, gen, only=only)
                tight = state.n_nodes + 2 + _min_future_nodes(state) > budget
                deep = options.max_depth is not None and state.replay.level_no >= options.max_depth
                # a root that would end the layout while conditions wait must be a container
                open_root = (at_root and options.hold_for_conditions and not tight and not deep
                             and any(not ok for i, ok in enumerate(state.satisfied) if i != selection))
                allowed = leaf_types if (tight or deep) else (vocab.internal_types() if open_root else None)
                _, attrs, _ = decode_substep3(model, sess, rnd, selection, greedy, temp,
                                              options.top_k, gen, allowed)
                _, lg12 = decode_substep4(model, sess, rnd, attrs)
                b1 = sample_binary(lg12[0], greedy, temp, gen)
                b2 = sample_binary(lg12[1], greedy, temp, gen)
                if tight or deep or not vocab.is_internal(attrs[4]):
                    b1 = True
                elif open_root:
                    b1 = False
                if state.pending_parent is None:
                    b2 = True
                elif tight:
                    b2 = True
                elif b2 and _group_incomplete(state, selection):
                    b2 = False
                elif options.hold_for_conditions and b2 and b1 and _closes_layout(state) and _waiting(state, selection):
                    # conditions are still waiting: keep the last group open
                    b2 = False
                    overflow = True
                state.push(SeqNode(*attrs, b1=b1, b2=b2), selection)
    finally:
        model.train(was_training)

    repaired = repair_sequence(state.items)
    seq = repaired.sequence
    tree = deserialize(seq, vocab, grid)
    bad = validate_tree(tree)
    if bad:
        raise LayoutError(f"generated tree is invalid: {bad[0]}")
    paths = _paths(seq)
    report = []
    for i, pos in enumerate(state.matched):
        new = repaired.index_map.get(pos) if pos is not None else None
        if new is None:
            report.append(SatisfactionEntry(i, False))
        else:
            report.append(SatisfactionEntry(i, True, new, paths[new]))
    result = GenerationResult(
        seq, tree, cond, report, zt.detach().clone(),
        truncated=truncated, malformed=bool(repaired.log), repair_log=repaired.log,
    )
    if truncated and options.strict:
        raise TruncatedGeneration(result)
    return result


# --- tasks --------------------------------------------------------------------


def structure_code_of(bundle: ModelBundle, seq: TokenSequence) -> StructureCode:
    """Posterior-mean structure code of a full layout sequence."""
    with torch.no_grad():
        return encode_structure(bundle.model, extract_structure_sequence(seq), sample=False)


def run_task(task, bundle: ModelBundle, cond: Optional[ConditionSet] = None,
             reference: Optional[LayoutTree] = None, options: DecodeOptions = DecodeOptions(),
             rounds: int = STRUCTEXTR_ROUNDS) -> GenerationResult:
    task = TaskKind.parse(task)
    if cond is None:
        if task is not TaskKind.UGEN:
            raise InvalidTask(f"{task.value} needs element conditions")
        cond = ConditionSet()
    if task is TaskKind.UGEN and cond.n:
        raise InvalidTask("unconditional generation takes no element conditions")
    if task is not TaskKind.GENO and cond.m:
        raise InvalidTask(f"{task.value} takes no organization conditions")
    if task is TaskKind.STRUCTTRAN:
        if reference is None:
            raise InvalidTask("structure transfer needs a reference layout")
        code = structure_code_of(bundle, serialize(reference))
        return generate(cond, code.mean, bundle, options)
    gen = torch.Generator().manual_seed(int(options.seed))
    z = StructureCode.from_prior(bundle.model.cfg.d_z, gen).z
    if task is not TaskKind.STRUCTEXTR:
        return generate(cond, z, bundle, options)
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    best = None
    for _ in range(rounds):
        res = generate(cond, z, bundle, options)
        if best is None or res.n_satisfied >= best.n_satisfied:
            best = res
        z = structure_code_of(bundle, res.sequence).mean
    return best


# --- request files ------------------------------------------------------------


def _quantize_value(v: float, extent: float, bins: int) -> int:
    if not math.isfinite(v):
        raise InvalidTask(f"non-finite condition value {v!r}")
    return min(max(math.floor(v / extent * bins), 0), bins - 1)


def conditions_from_json(d: dict, vocab: TypeVocabulary, grid: QuantGrid) -> ConditionSet:
    """Elements in layout units; absent or null attributes are masked."""
    if "canvas" in d:
        grid = grid.with_canvas(*d["canvas"])
    conds = []
    for el in d.get("elements", ()):
        vals: dict[str, Any] = {}
        for k, extent, bins in zip("xywh", grid.extents, grid.bins):
            if el.get(k) is not None:
                vals[k] = _quantize_value(float(el[k]), extent, bins)
        if el.get("type") is not None:
            vals["t"] = vocab.index(el["type"])
        conds.append(Condition(**vals))
    try:
        return ConditionSet(tuple(conds), tuple(tuple(g) for g in d.get("groups", ())))
    except ValueError as e:
        raise InvalidTask(str(e)) from None


def conditions_to_json(cond: ConditionSet, vocab: TypeVocabulary, grid: QuantGrid) -> dict:
    els = []
    for c in cond.attribute:
        el: dict[str, Any] = {}
        for k, v, extent, bins in zip("xywh", c.attrs, grid.extents, grid.bins):
            if v is not None:
                el[k] = (v + 0.5) * extent / bins
        if c.t is not None:
            el["type"] = vocab.name_of(c.t)
        els.append(el)
    return {"canvas": [grid.canvas_w, grid.canvas_h], "elements": els, "groups": [list(g) for g in cond.org]}


@dataclass
class TaskRequest:
    task: TaskKind
    conditions: ConditionSet
    reference: Optional[LayoutTree]
    options: DecodeOptions

    @classmethod
    def from_json(cls, d: dict, vocab: TypeVocabulary, grid: QuantGrid) -> "TaskRequest":
        if "task" not in d:
            raise InvalidTask("request has no 'task' field")
        task = TaskKind.parse(d["task"])
        cond = conditions_from_json(d.get("conditions") or {}, vocab, grid)
        ref = d.get("reference")
        reference = tree_from_json(ref, vocab, grid) if ref is not None else None
        options = DecodeOptions.from_dict(d.get("decode") or {}, seed=int(d.get("seed", 0)))
        return cls(task, cond, reference, options)

    def run(self, bundle: ModelBundle) -> GenerationResult:
        return run_task(self.task, bundle, self.conditions, self.reference, self.options)


def load_request(path, vocab: TypeVocabulary, grid: QuantGrid) -> TaskRequest:
    return TaskRequest.from_json(json.loads(Path(path).read_text()), vocab, grid)
