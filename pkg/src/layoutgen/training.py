"""Teacher-forced training: supervision targets, batching, losses and the optimization loop."""

from __future__ import annotations

import ctypes
import ctypes.util
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .conditions import TRAINING_REGIMES, ConditionSet, TaskKind
from .core import LayoutError, LayoutTree, QuantGrid, TypeVocabulary
from .corpus import make_condition_set
from .model.masks import GeneratorSlots, generator_base_mask, structure_mask
from .model.network import LayoutModel, ModelConfig, TrainBatch
from .serde import NL, extract_structure_sequence, parent_indices, serialize

log = logging.getLogger(__name__)


def _heap_trimmer() -> Callable[[], None]:
    """Return glibc's ``malloc_trim`` when available, else a no-op.

    Batches change shape every step, and glibc keeps the freed activation
    buffers in fragmented arenas, so resident memory climbs by gigabytes over
    an epoch unless the heap is trimmed.
    """
    name = ctypes.util.find_library("c")
    try:
        trim = ctypes.CDLL(name).malloc_trim if name else None
    except (OSError, AttributeError):
        trim = None
    if trim is None:
        return lambda: None
    return lambda: trim(0)

CHECKPOINT_VERSION = 1


class TargetError(LayoutError):
    pass


class TrainingDiverged(LayoutError):
    def __init__(self, step: int):
        super().__init__(f"total loss became NaN at step {step}")
        self.step = step


@dataclass
class Example:
    """Per-step supervision for one (tree, condition set) pair."""

    tok: np.ndarray
    is_nl: np.ndarray
    parent: np.ndarray
    sibling: np.ndarray
    sel: np.ndarray
    satisfied: np.ndarray
    org_satisfied: np.ndarray
    struct_tok: np.ndarray
    struct_nl: np.ndarray
    struct_parent: list
    cond_tok: np.ndarray
    org: tuple

    @property
    def b3(self) -> np.ndarray:
        return self.is_nl

    @property
    def b4(self) -> np.ndarray:
        return self.sel >= 0


def _tok_rows(seq) -> tuple[np.ndarray, np.ndarray]:
    tok = np.zeros((len(seq), 7), dtype=np.int64)
    nl = np.zeros(len(seq), dtype=bool)
    for i, t in enumerate(seq):
        if t is NL:
            nl[i] = True
        else:
            tok[i] = (t.x, t.y, t.w, t.h, t.t, int(t.b1), int(t.b2))
    return tok, nl


def build_targets(tree: LayoutTree, cond: ConditionSet, mask_index: Sequence[int] | None = None) -> Example:
    """Targets at every serialized position of ``tree`` under ``cond``.

    ``cond.provenance`` ties each attribute condition to the node it came from;
    that node's step is the one expected to select it.
    """
    if cond.n and cond.provenance is None:
        raise TargetError("condition set carries no provenance")
    seq = serialize(tree)
    L = len(seq)
    tok, nl = _tok_rows(seq)
    parents = parent_indices(seq)
    parent = np.full(L, -1, dtype=np.int64)
    sibling = np.full(L, -1, dtype=np.int64)
    last: dict = {}
    for pos in range(L):
        if nl[pos]:
            continue
        p = parents[pos]
        parent[pos] = -1 if p is None else p
        sibling[pos] = last.get(p, -1)
        last[p] = pos
    origin = {}
    for ci, pos in enumerate(cond.provenance or ()):
        if not (0 <= pos < L) or nl[pos]:
            raise TargetError(f"provenance {pos} of condition {ci} is not a node position")
        if not cond.attribute[ci].matches(tok[pos, :5]):
            raise TargetError(f"condition {ci} disagrees with node {pos}")
        origin[pos] = ci
    sel = np.array([origin.get(k, -1) for k in range(L)], dtype=np.int64)
    satisfied = np.zeros((L, cond.n), dtype=bool)
    done = np.zeros(cond.n, dtype=bool)
    for k in range(L):
        satisfied[k] = done
        if sel[k] >= 0:
            done[sel[k]] = True
    org_sat = np.zeros((L, cond.m), dtype=bool)
    for q, group in enumerate(cond.org):
        org_sat[:, q] = satisfied[:, list(group)].all(axis=1)

    sseq = extract_structure_sequence(seq)
    stok, snl = _tok_rows(sseq)
    sparents = parent_indices(sseq)
    struct_parent = [None if snl[i] else sparents[i] for i in range(len(sseq))]

    mi = mask_index or (tree.grid.bins_x, tree.grid.bins_y, tree.grid.bins_w, tree.grid.bins_h,
                        len(tree.vocabulary), 2, 2)
    cond_tok = np.array(
        [[mi[i] if v is None else v for i, v in enumerate(c.attrs)] + [mi[5], mi[6]] for c in cond.attribute],
        dtype=np.int64,
    ).reshape(cond.n, 7)
    return Example(tok, nl, parent, sibling, sel, satisfied, org_sat, stok, snl, struct_parent, cond_tok, cond.org)


def collate(examples: Sequence[Example], eps: Optional[torch.Tensor] = None) -> TrainBatch:
    B = len(examples)
    Ls = max(len(e.struct_nl) for e in examples)
    L = max(len(e.is_nl) for e in examples)
    n_max = max(e.cond_tok.shape[0] for e in examples)
    m_max = max(len(e.org) for e in examples)
    slots = GeneratorSlots(n_max, m_max)

    struct_tok = torch.zeros(B, Ls, 7, dtype=torch.long)
    struct_nl = torch.zeros(B, Ls, dtype=torch.bool)
    struct_m = torch.zeros(B, Ls + 1, Ls + 1, dtype=torch.bool)
    seq_tok = torch.zeros(B, L, 7, dtype=torch.long)
    seq_nl = torch.zeros(B, L, dtype=torch.bool)
    seq_valid = torch.zeros(B, L, dtype=torch.bool)
    cond_tok = torch.zeros(B, n_max, 7, dtype=torch.long)
    cond_valid = torch.zeros(B, slots.eoc, dtype=torch.bool)
    base = torch.zeros(B, slots.total, slots.total, dtype=torch.bool)
    n = torch.zeros(B, dtype=torch.long)
    m = torch.zeros(B, dtype=torch.long)
    steps: dict[str, list] = {k: [] for k in
                              ("tree", "pos", "parent", "sibling", "sel", "attrs", "b1", "b2", "b3", "b4", "node")}
    silenced = []
    for b, e in enumerate(examples):
        ls, lq = len(e.struct_nl), len(e.is_nl)
        struct_tok[b, :ls] = torch.from_numpy(e.struct_tok)
        struct_nl[b, :ls] = torch.from_numpy(e.struct_nl)
        struct_m[b] = structure_mask(e.struct_parent, list(e.struct_nl), Ls)
        seq_tok[b, :lq] = torch.from_numpy(e.tok)
        seq_nl[b, :lq] = torch.from_numpy(e.is_nl)
        seq_valid[b, :lq] = True
        nc, mc = e.cond_tok.shape[0], len(e.org)
        n[b], m[b] = nc, mc
        cond_tok[b, :nc] = torch.from_numpy(e.cond_tok)
        cond_valid[b, :nc] = True
        cond_valid[b, n_max : n_max + mc] = True
        base[b] = generator_base_mask(nc, mc, e.org, slots)
        sil = torch.zeros(lq, slots.total, dtype=torch.bool)
        sil[:, :nc] = torch.from_numpy(e.satisfied)
        sil[:, n_max : n_max + mc] = torch.from_numpy(e.org_satisfied)
        silenced.append(sil)
        steps["tree"].append(np.full(lq, b))
        steps["pos"].append(np.arange(lq))
        steps["parent"].append(e.parent)
        steps["sibling"].append(e.sibling)
        steps["sel"].append(e.sel)
        steps["attrs"].append(e.tok[:, :5])
        steps["b1"].append(e.tok[:, 5])
        steps["b2"].append(e.tok[:, 6])
        steps["b3"].append(e.is_nl)
        steps["b4"].append(e.sel >= 0)
        steps["node"].append(~e.is_nl)
    cat = {k: torch.from_numpy(np.concatenate(v)) for k, v in steps.items()}
    return TrainBatch(
        struct_tok=struct_tok, struct_nl=struct_nl, struct_mask=struct_m,
        seq_tok=seq_tok, seq_nl=seq_nl, seq_valid=seq_valid,
        cond_tok=cond_tok, cond_valid=cond_valid, n=n, m=m, base_mask=base, slots=slots,
        step_tree=cat["tree"].long(), step_pos=cat["pos"].long(),
        parent_pos=cat["parent"].long(), sibling_pos=cat["sibling"].long(),
        silenced=torch.cat(silenced), sel_target=cat["sel"].long(), attrs=cat["attrs"].long(),
        b1=cat["b1"].float(), b2=cat["b2"].float(), b3=cat["b3"].float(), b4=cat["b4"].float(),
        is_node=cat["node"].bool(), eps=eps,
    )


# --- losses -----------------------------------------------------------------

LOSS_NAMES = ("x", "y", "w", "h", "t", "b1", "b2", "b3", "b4", "sel")


@dataclass
class LossReport:
    x: float = 0.0
    y: float = 0.0
    w: float = 0.0
    h: float = 0.0
    t: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    b3: float = 0.0
    b4: float = 0.0
    sel: float = 0.0
    kl: float = 0.0
    beta: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_losses(out: dict, batch: TrainBatch, beta: float, weights: dict | None = None):
    """Returns the differentiable total and a per-component dict of tensors."""
    weights = weights or {}
    node = batch.is_node
    comp: dict[str, torch.Tensor] = {}
    for name, logits, target in zip("xywht", out["attrs"], batch.attrs.unbind(-1)):
        comp[name] = F.cross_entropy(logits[node], target[node])
    b12 = out["b12"][node]
    comp["b1"] = F.binary_cross_entropy_with_logits(b12[:, 0], batch.b1[node].to(b12.dtype))
    comp["b2"] = F.binary_cross_entropy_with_logits(b12[:, 1], batch.b2[node].to(b12.dtype))
    b34 = out["b34"]
    comp["b3"] = F.binary_cross_entropy_with_logits(b34[:, 0], batch.b3.to(b34.dtype))
    comp["b4"] = F.binary_cross_entropy_with_logits(b34[:, 1], batch.b4.to(b34.dtype))
    rows = batch.sel_target >= 0
    if bool(rows.any()):
        comp["sel"] = F.cross_entropy(out["sel"][rows], batch.sel_target[rows])
    else:
        comp["sel"] = b34.new_zeros(())
    comp["kl"] = out["kl"].mean()
    total = sum(weights.get(k, 1.0) * comp[k] for k in LOSS_NAMES)
    if beta:
        total = total + beta * comp["kl"]
    return total, comp


def report_from(comp: dict, total: torch.Tensor, beta: float) -> LossReport:
    return LossReport(**{k: float(v.detach()) for k, v in comp.items()}, beta=beta, total=float(total.detach()))


# --- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 3e-4
    min_lr_frac: float = 0.05
    schedule: str = "cosine"
    beta: float = 0.5
    warmup_frac: float = 0.1
    seed: int = 0
    task_mix: dict = field(default_factory=lambda: {t.value: 1.0 / len(TRAINING_REGIMES) for t in TRAINING_REGIMES})
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    loss_weights: dict = field(default_factory=dict)
    max_minutes: float = 0.0

    def __post_init__(self):
        w = np.array(list(self.task_mix.values()), dtype=float)
        if (w < 0).any() or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("task-mix weights must be non-negative and sum to 1")
        for k in self.task_mix:
            TaskKind.parse(k)

    def beta_at(self, step: int, total_steps: int) -> float:
        warm = self.warmup_frac * total_steps
        if warm <= 0:
            return self.beta
        return self.beta * min(1.0, step / warm)

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        frac = min(step / (total_steps - 1), 1.0)
        lo = self.lr * self.min_lr_frac
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * frac))


def sample_conditions(trees: Sequence[LayoutTree], cfg: TrainConfig, rng: np.random.Generator) -> list[ConditionSet]:
    regimes = list(cfg.task_mix)
    p = np.array([cfg.task_mix[r] for r in regimes], dtype=float)
    out = []
    for tree in trees:
        regime = regimes[rng.choice(len(regimes), p=p)]
        out.append(make_condition_set(tree, regime, int(rng.integers(1 << 31))))
    return out


def make_batch(model: LayoutModel, trees, conds, gen: Optional[torch.Generator] = None, sample: bool = True) -> TrainBatch:
    exs = [build_targets(t, c, model.cfg.mask_index) for t, c in zip(trees, conds)]
    eps = None
    if sample:
        eps = torch.randn(len(exs), model.cfg.d_z, generator=gen, dtype=next(model.parameters()).dtype)
    return collate(exs, eps)


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model: LayoutModel, vocabulary: TypeVocabulary, grid: QuantGrid,
                    optimizer=None, step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "vocabulary": vocabulary.to_dict(),
        "grid": grid.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": step,
        "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path, with_optimizer: bool = False):
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if "version" not in payload:
        raise LayoutError(f"{path}: checkpoint has no version field")
    if payload["version"] > CHECKPOINT_VERSION:
        raise LayoutError(f"{path}: unsupported checkpoint version {payload['version']}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = LayoutModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    vocab = TypeVocabulary.from_dict(payload["vocabulary"])
    grid = QuantGrid.from_dict(payload["grid"])
    if with_optimizer:
        return model, vocab, grid, payload
    return model, vocab, grid


# --- loop ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: LayoutModel
    history: list[dict]
    epoch_losses: list[float]
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def train(corpus: Sequence[LayoutTree], model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None,
          on_epoch: Callable[[int, LayoutModel, float], None] | None = None,
          model: LayoutModel | None = None) -> TrainResult:
    """Train all three components jointly with teacher forcing.

    Deterministic for a fixed seed in single-process mode. Writes
    ``metrics.ndjson`` and ``model.pt`` under ``out_dir`` when given.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = model or LayoutModel(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    vocab, grid = corpus[0].vocabulary, corpus[0].grid
    n_batches = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    out = Path(out_dir) if out_dir else None
    log_f = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_f = (out / "metrics.ndjson").open("w")
    history: list[dict] = []
    epoch_losses: list[float] = []
    step = 0
    trim_heap = _heap_trimmer()
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(corpus))
            trees = [corpus[i] for i in order]
            conds = sample_conditions(trees, cfg, rng)
            running = []
            for b in range(n_batches):
                sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
                batch = make_batch(model, trees[sl], conds[sl], gen)
                beta = cfg.beta_at(step, total_steps)
                for g in opt.param_groups:
                    g["lr"] = cfg.lr_at(step, total_steps)
                outp = model(batch)
                total, comp = compute_losses(outp, batch, beta, cfg.loss_weights)
                if not torch.isfinite(total):
                    raise TrainingDiverged(step)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                del outp
                trim_heap()
                rep = report_from(comp, total, beta)
                rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[0]["lr"], **rep.to_dict()}
                history.append(rec)
                running.append(rep.total)
                if log_f:
                    log_f.write(json.dumps(rec) + "\n")
                step += 1
            epoch_losses.append(float(np.mean(running)))
            log.info("epoch %d loss %.4f (%.0fs)", epoch, epoch_losses[-1], time.time() - t0)
            model.eval()
            if on_epoch:
                on_epoch(epoch, model, epoch_losses[-1])
            if out and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"model_epoch{epoch + 1}.pt", model, vocab, grid, opt, step)
            if cfg.max_minutes and time.time() - t0 > cfg.max_minutes * 60:
                log.warning("stopping after epoch %d: time budget exhausted", epoch)
                break
    finally:
        if log_f:
            log_f.close()
    model.eval()
    ckpt = save_checkpoint(out / "model.pt", model, vocab, grid, opt, step) if out else None
    return TrainResult(model, history, epoch_losses, ckpt, time.time() - t0)


@torch.no_grad()
def teacher_forced_accuracy(model: LayoutModel, trees: Sequence[LayoutTree], conds: Sequence[ConditionSet],
                            batch_size: int = 64) -> dict:
    """Exact-bin accuracy of the five attribute heads under teacher forcing.

    The structure code is the posterior mean. Returns per-head and overall
    accuracy over every node position.
    """
    model.eval()
    hits = np.zeros(5)
    count = 0
    for s in range(0, len(trees), batch_size):
        batch = make_batch(model, trees[s : s + batch_size], conds[s : s + batch_size], sample=False)
        out = model(batch)
        node = batch.is_node
        for i, logits in enumerate(out["attrs"]):
            hits[i] += float((logits[node].argmax(-1) == batch.attrs[node, i]).sum())
        count += int(node.sum())
    per = hits / max(count, 1)
    return {"overall": float(per.mean()), **{k: float(v) for k, v in zip("xywht", per)}}
