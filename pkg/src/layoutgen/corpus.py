"""Corpus construction: ingestion, a synthetic layout grammar, splits and condition recipes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .conditions import Condition, ConditionSet, InvalidTask, TaskKind
from .core import (
    SYNTHETIC,
    InvalidGeometry,
    LayoutError,
    LayoutNode,
    LayoutTree,
    QuantGrid,
    TypeVocabulary,
    quantize_box,
    validate_tree,
)
from .serde import parent_indices, serialize

log = logging.getLogger(__name__)


class IngestError(LayoutError):
    def __init__(self, path, pointer: str, message: str):
        super().__init__(f"{path}#{pointer}: {message}")
        self.path = path
        self.pointer = pointer


LAYOUT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["canvas", "root"],
    "properties": {
        "canvas": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "root": {"$ref": "#/$defs/node"},
    },
    "$defs": {
        "node": {
            "type": "object",
            "required": ["type", "box"],
            "properties": {
                "type": {"type": "string"},
                "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                "children": {"type": "array", "items": {"$ref": "#/$defs/node"}},
            },
        }
    },
}

_validator = jsonschema.Draft202012Validator(LAYOUT_SCHEMA)


@dataclass(frozen=True)
class CorpusConfig:
    max_nodes: int = 30
    max_depth: int = 5
    vocabulary: TypeVocabulary = SYNTHETIC
    grid: QuantGrid = field(default_factory=QuantGrid)
    split_ratio: Fraction = Fraction(9, 1)
    seed: int = 0

    def __post_init__(self):
        if self.max_nodes < 1 or self.max_depth < 1:
            raise ValueError("max_nodes and max_depth must be at least 1")
        object.__setattr__(self, "split_ratio", Fraction(self.split_ratio))
        if self.split_ratio <= 0:
            raise ValueError("split_ratio must be positive")


@dataclass
class IngestReport:
    kept: int = 0
    dropped: int = 0
    dropped_nodes: int = 0
    clipped_boxes: int = 0
    files: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ingest_node(d: dict, cfg: CorpusConfig, grid: QuantGrid, report: IngestReport) -> LayoutNode | None:
    if d["type"] not in cfg.vocabulary:
        report.dropped_nodes += sum(1 for _ in _walk_json(d))
        return None
    x, y, w, h = (float(v) for v in d["box"])
    # real hierarchies spill past the screen; clip instead of rejecting
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, grid.canvas_w), min(y + h, grid.canvas_h)
    if (x0, y0, x1, y1) != (x, y, x + w, y + h):
        report.clipped_boxes += 1
    if x1 <= x0 or y1 <= y0:
        report.dropped_nodes += sum(1 for _ in _walk_json(d))
        return None
    box = quantize_box((x0, y0, x1 - x0, y1 - y0), grid)
    children = []
    for c in d.get("children", ()):
        node = _ingest_node(c, cfg, grid, report)
        if node is not None:
            children.append(node)
    t = cfg.vocabulary.index(d["type"])
    if children and not cfg.vocabulary.is_internal(t):
        report.dropped_nodes += sum(len(list(c.iter_nodes())) for c in children)
        children = []
    return LayoutNode(*box, t, tuple(children))


def _walk_json(d: dict) -> Iterable[dict]:
    yield d
    for c in d.get("children", ()):
        yield from _walk_json(c)


def _layout_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.layout.json"))
    return [path]


def ingest_rico_like(path, config: CorpusConfig) -> tuple[list[LayoutTree], IngestReport]:
    """Load layout JSON files (a directory of ``*.layout.json`` or one file).

    A file holds one layout object or a list of them. Trees exceeding the
    node/depth caps are dropped; nodes whose type is outside the vocabulary are
    dropped with their subtrees.
    """
    path = Path(path)
    report = IngestReport()
    trees: list[LayoutTree] = []
    for f in _layout_files(path):
        report.files += 1
        try:
            doc = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            raise IngestError(f, "", f"invalid JSON: {e}") from e
        docs, prefix = (doc, "") if isinstance(doc, list) else ([doc], None)
        for i, d in enumerate(docs):
            base = f"/{i}" if prefix is not None else ""
            err = next(iter(sorted(_validator.iter_errors(d), key=lambda e: list(e.absolute_path))), None)
            if err is not None:
                pointer = base + "".join(f"/{p}" for p in err.absolute_path)
                raise IngestError(f, pointer or "/", err.message)
            grid = config.grid.with_canvas(*d["canvas"])
            try:
                root = _ingest_node(d["root"], config, grid, report)
            except InvalidGeometry as e:
                raise IngestError(f, base + "/root", str(e)) from e
            if root is None:
                report.dropped += 1
                continue
            tree = LayoutTree(root, config.vocabulary, grid)
            if len(tree) > config.max_nodes or tree.depth > config.max_depth or validate_tree(tree):
                report.dropped += 1
                continue
            trees.append(tree)
            report.kept += 1
    log.info("ingested %d trees, dropped %d", report.kept, report.dropped)
    return trees, report


_RICO_CLASS_MAP = {
    "LinearLayout": "LinearLayout",
    "RelativeLayout": "RelativeLayout",
    "FrameLayout": "FrameLayout",
    "ListView": "ListView",
    "GridView": "GridView",
    "RecyclerView": "RecyclerView",
    "ViewPager": "ViewPager",
    "Toolbar": "Toolbar",
    "WebView": "WebView",
    "DrawerLayout": "Drawer",
}


def convert_rico_view_hierarchy(raw: dict, canvas=(1440, 2560)) -> dict:
    """Convert a public RICO semantic-annotation hierarchy into layout JSON.

    Uses ``componentLabel`` when present, otherwise the Android class name's
    last component (unknown classes become ``View``). RICO ``bounds`` are
    ``[x1, y1, x2, y2]`` screen pixels.
    """

    def conv(node: dict) -> dict:
        label = node.get("componentLabel")
        if not label:
            cls = str(node.get("class", "")).rsplit(".", 1)[-1]
            label = _RICO_CLASS_MAP.get(cls, "View")
        x1, y1, x2, y2 = node.get("bounds", (0, 0, 0, 0))
        return {
            "type": label,
            "box": [x1, y1, x2 - x1, y2 - y1],
            "children": [conv(c) for c in node.get("children", ()) if c],
        }

    return {"canvas": list(canvas), "root": conv(raw)}


# --- synthetic grammar ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGrammarSpec:
    """Production rules for desk-scale structured layouts.

    Geometry is generated directly on the bin grid, so containment and
    non-overlap hold exactly after dequantization.
    """

    internal_kinds: tuple[str, ...] = ("Frame", "LinearH", "LinearV", "Grid", "List")
    leaf_labels: tuple[str, ...] = ("Text", "Image", "Icon", "Button", "Input")
    branching: dict = field(
        default_factory=lambda: {
            "Frame": (1, 2),
            "LinearH": (2, 3, 4),
            "LinearV": (2, 3, 4),
            "Grid": (4, 6),
            "List": (2, 3, 4, 5),
        }
    )
    # probability that a non-root node at a given depth is a container
    internal_prob: tuple[float, ...] = (1.0, 0.5, 0.35, 0.2, 0.0)
    root_kinds: tuple[str, ...] = ("Frame", "LinearV", "List")
    min_container: int = 8
    padding: int = 1
    gutter: int = 0
    bins: int = 64
    max_nodes: int = 30

    @property
    def max_depth(self) -> int:
        return len(self.internal_prob)

    def vocabulary(self) -> TypeVocabulary:
        return TypeVocabulary.from_names(self.internal_kinds, self.leaf_labels, name="synthetic")

    def grid(self) -> QuantGrid:
        return QuantGrid(self.bins, self.bins, self.bins, self.bins, 1.0, 1.0)

    @classmethod
    def from_config(cls, cfg: dict) -> "SyntheticGrammarSpec":
        kw: dict = {}
        for key in ("min_container", "padding", "gutter", "bins", "max_nodes"):
            if key in cfg:
                kw[key] = int(cfg[key])
        for key in ("internal_kinds", "leaf_labels", "root_kinds"):
            if key in cfg:
                kw[key] = tuple(s.strip() for s in str(cfg[key]).split(",") if s.strip())
        if "internal_prob" in cfg:
            kw["internal_prob"] = tuple(float(s) for s in str(cfg["internal_prob"]).split(","))
        spec = cls(**kw)
        branching = dict(spec.branching)
        for k in spec.internal_kinds:
            key = f"branching.{k}"
            if key in cfg:
                branching[k] = tuple(int(s) for s in str(cfg[key]).split(","))
        return cls(**{**kw, "branching": branching})


def _split(start: int, extent: int, k: int, gutter: int) -> list[tuple[int, int]]:
    """Divide bin positions [start, start + extent] into k equal runs.

    A run (p, s) covers positions p..p+s; consecutive runs are separated by
    ``gutter`` free positions. Leftover positions stay at the trailing edge.
    """
    slots = extent + 1 - gutter * (k - 1)
    u = slots // k
    if u < 1:
        return []
    return [(start + i * (u + gutter), u - 1) for i in range(k)]


class _Grammar:
    def __init__(self, spec: SyntheticGrammarSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.vocab = spec.vocabulary()
        self.count = 0

    def leaf_type(self, w: int, h: int) -> int:
        labels = self.spec.leaf_labels
        # aspect-driven label preference gives the label distribution some geometric signal
        weights = np.ones(len(labels))
        aspect = (w + 1) / (h + 1)
        for i, name in enumerate(labels):
            if name in ("Text", "Input", "Button") and aspect >= 2.0:
                weights[i] = 4.0
            elif name == "Icon" and w <= 6 and h <= 6:
                weights[i] = 6.0
            elif name == "Image" and w >= 12 and h >= 12:
                weights[i] = 4.0
        return self.vocab.index(labels[self.rng.choice(len(labels), p=weights / weights.sum())])

    def child_boxes(self, kind: str, box, k: int) -> list[tuple[int, int, int, int]]:
        x, y, w, h = box
        p, g = self.spec.padding, self.spec.gutter
        ix, iy, iw, ih = x + p, y + p, w - 2 * p, h - 2 * p
        if iw < 0 or ih < 0:
            return []
        if kind == "LinearH":
            return [(cx, iy, cw, ih) for cx, cw in _split(ix, iw, k, g)]
        if kind in ("LinearV", "List"):
            return [(ix, cy, iw, ch) for cy, ch in _split(iy, ih, k, g)]
        if kind == "Grid":
            cols = 2 if k == 4 else 3
            rows = k // cols
            xs, ys = _split(ix, iw, cols, g), _split(iy, ih, rows, g)
            if not xs or not ys:
                return []
            return [(cx, cy, cw, ch) for cy, ch in ys for cx, cw in xs]
        if kind == "Frame":
            if k == 1:
                return [(ix, iy, iw, ih)]
            head = max(ih // 4, 1)
            top = (ix, iy, iw, head - 1)
            rest = _split(iy + head, ih - head, 1, 0)
            return [top] + [(ix, cy, iw, ch) for cy, ch in rest]
        raise ValueError(f"no production for {kind!r}")

    def node(self, box, depth: int, kind: str | None = None) -> LayoutNode:
        self.count += 1
        spec = self.spec
        x, y, w, h = box
        if kind is None:
            p = spec.internal_prob[depth - 1] if depth - 1 < len(spec.internal_prob) else 0.0
            big = min(w, h) + 1 >= spec.min_container
            if big and self.rng.random() < p:
                kind = spec.internal_kinds[self.rng.integers(len(spec.internal_kinds))]
        if kind is None:
            return LayoutNode(x, y, w, h, self.leaf_type(w, h))
        opts = spec.branching[kind]
        k = int(opts[self.rng.integers(len(opts))])
        boxes = self.child_boxes(kind, box, k)
        if not boxes:
            return LayoutNode(x, y, w, h, self.leaf_type(w, h))
        if kind == "List":
            # list items repeat one element type
            item = self._list_item(boxes[0], depth + 1)
            children = [self._retype(item, b, depth + 1) for b in boxes]
        else:
            children = [self.node(b, depth + 1) for b in boxes]
        return LayoutNode(x, y, w, h, self.vocab.index(kind), tuple(children))

    def _list_item(self, box, depth):
        p = self.spec.internal_prob[depth - 1] if depth - 1 < len(self.spec.internal_prob) else 0.0
        if min(box[2], box[3]) + 1 >= self.spec.min_container and self.rng.random() < p:
            return ("LinearH", self.rng.integers(1 << 30))
        return ("leaf", self.leaf_type(box[2], box[3]))

    def _retype(self, item, box, depth) -> LayoutNode:
        kind, val = item
        if kind == "leaf":
            self.count += 1
            return LayoutNode(*box, int(val))
        return self.node(box, depth, kind="LinearH")

    def tree(self) -> LayoutTree:
        spec = self.spec
        root_kind = spec.root_kinds[self.rng.integers(len(spec.root_kinds))]
        root = self.node((0, 0, spec.bins - 1, spec.bins - 1), 1, kind=root_kind)
        return LayoutTree(root, self.vocab, spec.grid())


def generate_synthetic(spec: SyntheticGrammarSpec, n: int, seed: int) -> list[LayoutTree]:
    """Sample ``n`` valid trees; identical output for identical (spec, n, seed)."""
    rng = np.random.default_rng(seed)
    out: list[LayoutTree] = []
    while len(out) < n:
        g = _Grammar(spec, rng)
        tree = g.tree()
        if len(tree) <= spec.max_nodes and tree.depth <= spec.max_depth:
            out.append(tree)
    return out


def shuffle_structure(tree: LayoutTree, rng: np.random.Generator) -> LayoutTree:
    """Keep every node's box and type but rewire parent links at random.

    Internal-kind nodes are attached under random earlier containers, then
    leaves under random containers; used as a structurally corrupted reference.
    """
    vocab = tree.vocabulary
    nodes = tree.nodes()
    internals = [n for n in nodes[1:] if vocab.is_internal(n.t)]
    leaves = [n for n in nodes[1:] if not vocab.is_internal(n.t)]
    rng.shuffle(internals)
    parents = [tree.root] + internals
    kids: dict[int, list] = {i: [] for i in range(len(parents))}
    for j in range(1, len(parents)):
        kids[int(rng.integers(j))].append(j)
    leaf_kids: dict[int, list] = {i: [] for i in range(len(parents))}
    for leaf in leaves:
        leaf_kids[int(rng.integers(len(parents)))].append(leaf)

    def build(i: int) -> LayoutNode:
        p = parents[i]
        children = [build(j) for j in kids[i]] + [LayoutNode(*l.box, l.t) for l in leaf_kids[i]]
        return LayoutNode(*p.box, p.t, tuple(children))

    return LayoutTree(build(0), vocab, tree.grid)


def random_tree(rng: np.random.Generator, vocabulary: TypeVocabulary = SYNTHETIC, grid: QuantGrid | None = None,
                max_nodes: int = 60, max_depth: int = 6) -> LayoutTree:
    """Uniformly messy valid tree: random shape, types and boxes, no geometric grammar."""
    grid = grid or QuantGrid()
    internal, leaf = vocabulary.internal_types(), vocabulary.leaf_types()
    target = int(rng.integers(1, max_nodes + 1))
    budget = [target - 1]

    def box() -> tuple[int, int, int, int]:
        return tuple(int(rng.integers(b)) for b in grid.bins)

    def node(depth: int) -> LayoutNode:
        can_branch = depth < max_depth and budget[0] > 0 and internal
        if can_branch and (not leaf or rng.random() < 0.5):
            k = int(rng.integers(1, min(budget[0], 5) + 1))
            budget[0] -= k
            return LayoutNode(*box(), int(rng.choice(internal)), tuple(node(depth + 1) for _ in range(k)))
        return LayoutNode(*box(), int(rng.choice(leaf or internal)))

    return LayoutTree(node(1), vocabulary, grid)


# --- corpus directories -----------------------------------------------------------


def write_corpus(trees: Sequence[LayoutTree], out_dir, config: CorpusConfig | None = None) -> list[str]:
    """One ``NNNNN.layout.json`` per tree plus train/test manifests."""
    from .core import dumps_tree

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, t in enumerate(trees):
        name = f"{i:05d}.layout.json"
        (out / name).write_text(dumps_tree(t) + "\n")
        names.append(name)
    write_split_manifests(names, config or CorpusConfig(), out)
    return names


def read_corpus(path, config: CorpusConfig, part: str | None = None) -> list[LayoutTree]:
    """Read a corpus directory, optionally restricted to its ``train`` or ``test`` manifest."""
    path = Path(path)
    if part is None or not (path / f"{part}.txt").exists():
        return ingest_rico_like(path, config)[0]
    trees = []
    for name in (path / f"{part}.txt").read_text().split():
        trees.extend(ingest_rico_like(path / name, config)[0])
    return trees


# --- splits ---------------------------------------------------------------------


def split(corpus: Sequence[LayoutTree], config: CorpusConfig) -> tuple[list[LayoutTree], list[LayoutTree]]:
    """Seeded train/test partition with test size ``floor(n / (ratio + 1))``."""
    if not corpus:
        raise ValueError("cannot split an empty corpus")
    n = len(corpus)
    r = config.split_ratio
    n_test = int(Fraction(n) / (r + 1))
    perm = np.random.default_rng(config.seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [t for i, t in enumerate(corpus) if i not in test_idx]
    test = [t for i, t in enumerate(corpus) if i in test_idx]
    return train, test


def write_split_manifests(names: Sequence[str], config: CorpusConfig, out_dir) -> tuple[list[str], list[str]]:
    train, test = split(list(names), config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("".join(f"{n}\n" for n in train))
    (out / "test.txt").write_text("".join(f"{n}\n" for n in test))
    return train, test


# --- conditions -----------------------------------------------------------------


def leaf_positions(tree: LayoutTree) -> list[int]:
    seq = serialize(tree)
    return [i for i, tok in seq.nodes() if tok.b1]


def make_condition_set(tree: LayoutTree, task, seed: int) -> ConditionSet:
    """Derive a condition set from a ground-truth tree by masking attributes.

    Conditions follow leaf serialization order and record the serialized
    position of their source node.
    """
    task = TaskKind.parse(task)
    seq = serialize(tree)
    rng = np.random.default_rng(seed)
    leaves = [(i, tok) for i, tok in seq.nodes() if tok.b1]
    if task is TaskKind.UGEN:
        return ConditionSet((), (), ())
    if task in (TaskKind.GENT, TaskKind.GENO):
        conds = [Condition(t=tok.t) for _, tok in leaves]
    elif task is TaskKind.GENTS:
        conds = [Condition(w=tok.w, h=tok.h, t=tok.t) for _, tok in leaves]
    elif task in (TaskKind.STRUCTEXTR, TaskKind.STRUCTTRAN):
        conds = [Condition(*tok.attrs) for _, tok in leaves]
    elif task is TaskKind.COMPLETION:
        k = int(rng.integers(1, max(1, len(leaves) - 1) + 1))
        leaves = leaves[:k]
        conds = [Condition(*tok.attrs) for _, tok in leaves]
    else:
        raise InvalidTask(f"no condition recipe for {task}")
    org: list[tuple[int, ...]] = []
    if task is TaskKind.GENO:
        parents = parent_indices(seq)
        groups: dict[int, list[int]] = {}
        for ci, (pos, _) in enumerate(leaves):
            groups.setdefault(parents[pos], []).append(ci)
        org = [tuple(g) for _, g in sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0])) if len(g) >= 2]
    return ConditionSet(tuple(conds), tuple(org), tuple(pos for pos, _ in leaves))
