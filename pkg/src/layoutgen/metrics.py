"""Element and structure metrics plus the inclusion-based structure extractor."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import LayoutNode, LayoutTree, QuantGrid, TypeVocabulary, normalized_box

N_PROJECTIONS = 128
PROJECTION_SEED = 0
SCALE_PAIR_LABEL = 100.0


class MetricWarning(UserWarning):
    pass


def _arr(boxes) -> np.ndarray:
    a = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if not np.isfinite(a).all():
        raise ValueError("boxes must be finite")
    return a


def node_box(node: LayoutNode, grid: QuantGrid) -> tuple[float, float, float, float]:
    """Normalized (x, y, w, h) of a node on the unit canvas."""
    return normalized_box(node.box, grid)


# --- element metrics -----------------------------------------------------------


def _edges(a: np.ndarray) -> np.ndarray:
    x, y, w, h = a.T
    return np.stack([x, x + w / 2, x + w, y, y + h / 2, y + h], axis=1)


def align_score(boxes) -> float:
    """Mean of ``-log(1 - d_i)`` where ``d_i`` is element i's closest same-kind edge gap."""
    a = _arr(boxes)
    n = len(a)
    if n < 2:
        return 0.0
    e = _edges(a)
    gaps = np.abs(e[:, None, :] - e[None, :, :]).min(-1)
    np.fill_diagonal(gaps, np.inf)
    d = np.clip(gaps.min(1), 0.0, 1.0 - 1e-12)
    return float(np.mean(-np.log1p(-d)))


def _intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    return np.clip(iw, 0, None) * np.clip(ih, 0, None)


def overlap_score(boxes) -> float:
    """Summed pairwise intersection area over summed box area."""
    a = _arr(boxes)
    area = a[:, 2].clip(0) * a[:, 3].clip(0)
    keep = area > 0
    a, total = a[keep], area[keep].sum()
    if total <= 0:
        return 0.0
    inter = _intersection(a[:, None], a[None, :])
    return float(np.triu(inter, k=1).sum() / total)


# --- structure metrics ----------------------------------------------------------


def sibling_boxes(tree: LayoutTree) -> list[np.ndarray]:
    return [_arr([node_box(c, tree.grid) for c in kids]) for _, kids in tree.sibling_sets()]


def s_align(tree: LayoutTree) -> float:
    sets = sibling_boxes(tree)
    return float(np.mean([align_score(s) for s in sets])) if sets else 0.0


def s_overlap(tree: LayoutTree) -> float:
    sets = sibling_boxes(tree)
    return float(np.mean([overlap_score(s) for s in sets])) if sets else 0.0


@dataclass(frozen=True)
class InclusionResult:
    score: float
    pairs: int
    skipped: int


def s_inclusion(tree: LayoutTree) -> InclusionResult:
    """Mean of ``area(parent ∩ child) / area(child)`` over parent-child pairs."""
    vals, skipped = [], 0
    for p, c in tree.parent_child_pairs():
        pb, cb = np.array(node_box(p, tree.grid)), np.array(node_box(c, tree.grid))
        ca = cb[2] * cb[3]
        if ca <= 0:
            skipped += 1
            continue
        vals.append(float(_intersection(pb, cb)) / ca)
    return InclusionResult(float(np.mean(vals)) if vals else 1.0, len(vals), skipped)


# --- distribution distances -------------------------------------------------------


def label_distribution(trees: Iterable[LayoutTree], pairs: bool = False) -> Counter:
    c: Counter = Counter()
    for t in trees:
        if pairs:
            c.update((p.t, ch.t) for p, ch in t.parent_child_pairs())
        else:
            c.update(n.t for n in t.leaves())
    return c


def _normalize(c: Counter, support) -> np.ndarray:
    v = np.array([c.get(k, 0) for k in support], dtype=float)
    s = v.sum()
    return v / s if s else v


def total_variation(a: Counter, b: Counter) -> float:
    support = sorted(set(a) | set(b))
    if not support or not sum(a.values()) or not sum(b.values()):
        warnings.warn("empty label distribution; distance reported as 0", MetricWarning)
        return 0.0
    return 0.5 * float(np.abs(_normalize(a, support) - _normalize(b, support)).sum())


def wasserstein_label(corpus_a: Sequence[LayoutTree], corpus_b: Sequence[LayoutTree], pairs: bool = False) -> float:
    """Label-distribution distance under the 0/1 ground metric (unscaled)."""
    return total_variation(label_distribution(corpus_a, pairs), label_distribution(corpus_b, pairs))


def box_cloud(trees: Iterable[LayoutTree], pairs: bool = False) -> np.ndarray:
    rows = []
    for t in trees:
        if pairs:
            rows.extend(node_box(p, t.grid) + node_box(c, t.grid) for p, c in t.parent_child_pairs())
        else:
            rows.extend(node_box(n, t.grid) for n in t.leaves())
    return np.asarray(rows, dtype=float).reshape(-1, 8 if pairs else 4)


def projection_directions(dim: int, n: int = N_PROJECTIONS, seed: int = PROJECTION_SEED) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal((n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def wasserstein_1d(a, b) -> float:
    """Exact W1 between two uniform-weight empirical measures on the line."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    if not len(a) or not len(b):
        raise ValueError("empty sample")
    grid = np.concatenate([a, b])
    grid.sort()
    fa = np.searchsorted(a, grid[:-1], side="right") / len(a)
    fb = np.searchsorted(b, grid[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))


def sliced_wasserstein(x, y, n: int = N_PROJECTIONS, seed: int = PROJECTION_SEED) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if not len(x) or not len(y):
        warnings.warn("empty point cloud; distance reported as 0", MetricWarning)
        return 0.0
    dirs = projection_directions(x.shape[1], n, seed)
    px, py = x @ dirs.T, y @ dirs.T
    return float(np.mean([wasserstein_1d(px[:, k], py[:, k]) for k in range(n)]))


def wasserstein_box(corpus_a: Sequence[LayoutTree], corpus_b: Sequence[LayoutTree], pairs: bool = False,
                    n_projections: int = N_PROJECTIONS, seed: int = PROJECTION_SEED) -> float:
    return sliced_wasserstein(box_cloud(corpus_a, pairs), box_cloud(corpus_b, pairs), n_projections, seed)


def exact_transport(cost: np.ndarray, wa: Optional[np.ndarray] = None, wb: Optional[np.ndarray] = None) -> float:
    """Optimal transport cost by linear programming; meant for small supports."""
    from scipy.optimize import linprog

    cost = np.asarray(cost, float)
    na, nb = cost.shape
    wa = np.full(na, 1 / na) if wa is None else np.asarray(wa, float)
    wb = np.full(nb, 1 / nb) if wb is None else np.asarray(wb, float)
    rows = np.kron(np.eye(na), np.ones(nb))
    cols = np.kron(np.ones(na), np.eye(nb))
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([wa, wb]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(res.message)
    return float(res.fun)


# --- baseline structure extraction ------------------------------------------------


def baseline_extract_structure(leaves: Sequence[Sequence[int]], internals: Sequence[Sequence[int]],
                               vocabulary: TypeVocabulary, grid: QuantGrid,
                               root_type: Optional[int] = None) -> LayoutTree:
    """Attach every element to the internal box that covers it most.

    Elements are ``(x, y, w, h, t)`` in bins. A candidate parent must be an
    internal box of strictly larger area; the best has the largest overlap
    over the element's area, then the smaller area, then the earlier index.
    Elements without a candidate hang under a full-canvas root.
    """
    for it in internals:
        if not vocabulary.is_internal(it[4]):
            raise ValueError(f"type {vocabulary.name_of(it[4])!r} is not an internal type")
    elems = [tuple(map(int, e)) for e in internals] + [tuple(map(int, e)) for e in leaves]
    n_int = len(internals)
    boxes = np.array([normalized_box(e[:4], grid) for e in elems]).reshape(-1, 4)
    area = boxes[:, 2] * boxes[:, 3]
    parent: list[Optional[int]] = []
    for i in range(len(elems)):
        best, key = None, None
        for j in range(n_int):
            if j == i or not area[j] > area[i]:
                continue
            cover = float(_intersection(boxes[j], boxes[i])) / area[i] if area[i] > 0 else 0.0
            if cover <= 0:
                continue
            k = (-cover, area[j], j)
            if key is None or k < key:
                best, key = j, k
        parent.append(best)

    def build(i: int) -> LayoutNode:
        kids = [build(c) for c in range(len(elems)) if parent[c] == i]
        return LayoutNode(*elems[i], tuple(kids))

    tops = [i for i in range(len(elems)) if parent[i] is None]
    if len(tops) == 1 and tops[0] < n_int:
        return LayoutTree(build(tops[0]), vocabulary, grid)
    rt = root_type if root_type is not None else vocabulary.internal_types()[0]
    bx, by, bw, bh = grid.bins
    root = LayoutNode(0, 0, bw - 1, bh - 1, rt, tuple(build(i) for i in tops))
    return LayoutTree(root, vocabulary, grid)


def strip_structure(tree: LayoutTree) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Flatten a tree into its leaf-kind and internal-kind elements."""
    leaves, internals = [], []
    for n in tree.root.iter_nodes():
        rec = (*n.box, n.t)
        (internals if tree.vocabulary.is_internal(n.t) else leaves).append(rec)
    return leaves, internals


# --- reports ------------------------------------------------------------------------

LAYOUT_METRICS = ("align", "overlap", "s_align", "s_overlap", "s_inclusion")


def layout_metrics(tree: LayoutTree) -> dict:
    leaves = [node_box(n, tree.grid) for n in tree.leaves()]
    inc = s_inclusion(tree)
    return {
        "align": align_score(leaves),
        "overlap": overlap_score(leaves),
        "s_align": s_align(tree),
        "s_overlap": s_overlap(tree),
        "s_inclusion": inc.score,
        "inclusion_skipped": inc.skipped,
    }


@dataclass
class EvaluationReport:
    scalars: dict
    per_layout: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metrics": self.scalars, "per_layout": self.per_layout, "warnings": self.warnings}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        for k, v in self.scalars.items():
            w.writerow([k, v])
        return buf.getvalue()


def evaluate(generated: Sequence[LayoutTree], reference: Optional[Sequence[LayoutTree]] = None) -> EvaluationReport:
    """Per-layout metrics averaged over ``generated`` plus distances to ``reference``."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricWarning)
        per = [layout_metrics(t) for t in generated]
        scalars = {k: (float(np.mean([p[k] for p in per])) if per else 0.0) for k in LAYOUT_METRICS}
        if not per:
            warnings.warn("no generated layouts; averages reported as 0", MetricWarning)
        if reference is not None:
            scalars["w_label"] = wasserstein_label(generated, reference)
            raw = wasserstein_label(generated, reference, pairs=True)
            scalars["w_s_label_raw"] = raw
            scalars["w_s_label"] = raw * SCALE_PAIR_LABEL
            scalars["w_box"] = wasserstein_box(generated, reference)
            scalars["w_s_box"] = wasserstein_box(generated, reference, pairs=True)
    msgs = [str(w.message) for w in caught]
    return EvaluationReport(scalars, per, msgs)


def is_finite_report(report: EvaluationReport) -> bool:
    return all(math.isfinite(v) for v in report.scalars.values())
