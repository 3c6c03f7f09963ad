"""Layout tree data model, type vocabularies and geometric quantization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence


class LayoutError(Exception):
    """Base class for all layout-related errors."""


class InvalidGeometry(LayoutError):
    pass


class InvalidTree(LayoutError):
    pass


class Kind(str, Enum):
    LEAF = "leaf"
    INTERNAL = "internal"


@dataclass(frozen=True)
class TypeVocabulary:
    """Ordered element types, each tagged as a leaf or an internal kind."""

    entries: tuple[tuple[str, Kind], ...]
    name: str = "custom"

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("type names must be unique")
        kinds = {Kind(k) for _, k in self.entries}
        if kinds != {Kind.LEAF, Kind.INTERNAL}:
            raise ValueError("vocabulary needs at least one leaf and one internal type")
        object.__setattr__(self, "entries", tuple((n, Kind(k)) for n, k in self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.entries):
            if n == name:
                return i
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.entries)

    def name_of(self, t: int) -> str:
        return self.entries[t][0]

    def kind(self, t: int) -> Kind:
        return self.entries[t][1]

    def is_internal(self, t: int) -> bool:
        return self.entries[t][1] is Kind.INTERNAL

    def leaf_types(self) -> list[int]:
        return [i for i, (_, k) in enumerate(self.entries) if k is Kind.LEAF]

    def internal_types(self) -> list[int]:
        return [i for i, (_, k) in enumerate(self.entries) if k is Kind.INTERNAL]

    def to_dict(self) -> dict:
        return {"name": self.name, "entries": [[n, k.value] for n, k in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "TypeVocabulary":
        return cls(tuple((n, Kind(k)) for n, k in d["entries"]), name=d.get("name", "custom"))

    @classmethod
    def from_names(cls, internal: Sequence[str], leaf: Sequence[str], name: str = "custom"):
        entries = [(n, Kind.INTERNAL) for n in internal] + [(n, Kind.LEAF) for n in leaf]
        return cls(tuple(entries), name=name)


# Container-like RICO types are treated as internal; the split is an assumption.
_RICO_TYPES = [
    "View", "LinearLayout", "RelativeLayout", "FrameLayout", "ViewPager", "ListView",
    "GridView", "Toolbar", "Card", "ListItem", "Drawer", "RecyclerView", "WebView",
    "Advertisement", "TextButton", "ButtonBar", "Icon", "DatePicker", "Modal", "Text",
    "Image", "Video", "Checkbox", "Input", "BackgroundImage", "NumberStepper", "MapView",
    "OnOffSwitch", "Slider", "RadioButton", "PagerIndicator", "MultiTab", "BottomNavigation",
]
_RICO_INTERNAL = {
    "View", "LinearLayout", "RelativeLayout", "FrameLayout", "ListView", "GridView", "Card",
    "ListItem", "RecyclerView", "ViewPager", "Drawer", "ButtonBar", "Toolbar", "MultiTab",
    "BottomNavigation",
}

RICO = TypeVocabulary(
    tuple((n, Kind.INTERNAL if n in _RICO_INTERNAL else Kind.LEAF) for n in _RICO_TYPES),
    name="rico",
)

WEBFOREST = TypeVocabulary.from_names(
    ["Root", "Container"], ["Image", "Text", "Button", "Graphic", "Input"], name="webforest"
)

SYNTHETIC = TypeVocabulary.from_names(
    ["Frame", "LinearH", "LinearV", "Grid", "List"],
    ["Text", "Image", "Icon", "Button", "Input"],
    name="synthetic",
)

PRESETS = {v.name: v for v in (RICO, WEBFOREST, SYNTHETIC)}


@dataclass(frozen=True)
class QuantGrid:
    bins_x: int = 64
    bins_y: int = 64
    bins_w: int = 64
    bins_h: int = 64
    canvas_w: float = 1.0
    canvas_h: float = 1.0

    def __post_init__(self):
        if min(self.bins_x, self.bins_y, self.bins_w, self.bins_h) < 1:
            raise ValueError("bin counts must be positive")
        if not (self.canvas_w > 0 and self.canvas_h > 0):
            raise ValueError("canvas extents must be positive")

    @property
    def bins(self) -> tuple[int, int, int, int]:
        return (self.bins_x, self.bins_y, self.bins_w, self.bins_h)

    @property
    def extents(self) -> tuple[float, float, float, float]:
        return (self.canvas_w, self.canvas_h, self.canvas_w, self.canvas_h)

    def with_canvas(self, w: float, h: float) -> "QuantGrid":
        return QuantGrid(self.bins_x, self.bins_y, self.bins_w, self.bins_h, float(w), float(h))

    def to_dict(self) -> dict:
        return {
            "bins": list(self.bins),
            "canvas": [self.canvas_w, self.canvas_h],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantGrid":
        bx, by, bw, bh = d["bins"]
        cw, ch = d["canvas"]
        return cls(bx, by, bw, bh, cw, ch)


def quantize_box(box: Sequence[float], grid: QuantGrid) -> tuple[int, int, int, int]:
    """Map an (x, y, w, h) box in layout units to bin indices.

    Values are binned with ``floor(v / extent * bins)`` and clamped to the grid.
    Boxes reaching more than one bin past the canvas raise ``InvalidGeometry``.
    """
    x, y, w, h = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise InvalidGeometry(f"non-finite box {box!r}")
    if w <= 0 or h <= 0:
        raise InvalidGeometry(f"box {box!r} has non-positive size")
    tol_x = grid.canvas_w / grid.bins_x
    tol_y = grid.canvas_h / grid.bins_y
    if x < -tol_x or y < -tol_y or x + w > grid.canvas_w + tol_x or y + h > grid.canvas_h + tol_y:
        raise InvalidGeometry(f"box {box!r} lies outside the {grid.canvas_w}x{grid.canvas_h} canvas")
    out = []
    for v, extent, bins in zip((x, y, w, h), grid.extents, grid.bins):
        q = math.floor(v / extent * bins)
        out.append(min(max(q, 0), bins - 1))
    return tuple(out)


def dequantize_box(q: Sequence[int], grid: QuantGrid) -> tuple[float, float, float, float]:
    """Bin centres in layout units; ``quantize_box`` inverts this exactly."""
    return tuple((qi + 0.5) * extent / bins for qi, extent, bins in zip(q, grid.extents, grid.bins))


def normalized_box(q: Sequence[int], grid: QuantGrid) -> tuple[float, float, float, float]:
    """Bin centres on the unit canvas."""
    return tuple((qi + 0.5) / bins for qi, bins in zip(q, grid.bins))


@dataclass(frozen=True)
class LayoutNode:
    x: int
    y: int
    w: int
    h: int
    t: int
    children: tuple["LayoutNode", ...] = ()

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def iter_nodes(self) -> Iterator["LayoutNode"]:
        yield self
        for c in self.children:
            yield from c.iter_nodes()


@dataclass(frozen=True)
class LayoutTree:
    root: LayoutNode
    vocabulary: TypeVocabulary = field(default=SYNTHETIC, compare=True)
    grid: QuantGrid = field(default_factory=QuantGrid)

    def nodes(self) -> list[LayoutNode]:
        return list(self.root.iter_nodes())

    def __len__(self) -> int:
        return sum(1 for _ in self.root.iter_nodes())

    @property
    def depth(self) -> int:
        def d(n: LayoutNode) -> int:
            return 1 + max((d(c) for c in n.children), default=0)

        return d(self.root)

    def leaves(self) -> list[LayoutNode]:
        return [n for n in self.root.iter_nodes() if n.is_leaf]

    def levels(self) -> list[list[LayoutNode]]:
        out, level = [], [self.root]
        while level:
            out.append(level)
            level = [c for n in level for c in n.children]
        return out

    def sibling_sets(self) -> list[tuple[LayoutNode, tuple[LayoutNode, ...]]]:
        return [(n, n.children) for n in self.root.iter_nodes() if n.children]

    def parent_child_pairs(self) -> list[tuple[LayoutNode, LayoutNode]]:
        return [(n, c) for n in self.root.iter_nodes() for c in n.children]


@dataclass(frozen=True)
class Violation:
    path: tuple[int, ...]
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        p = "/".join(map(str, self.path)) or "<root>"
        return f"{p}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def validate_tree(tree: LayoutTree) -> list[Violation]:
    """Check every node/tree invariant; violations are returned, never raised."""
    out: list[Violation] = []
    vocab, grid = tree.vocabulary, tree.grid
    seen: set[int] = set()
    stack: list[tuple[LayoutNode, tuple[int, ...]]] = [(tree.root, ())]
    while stack:
        node, path = stack.pop()
        if id(node) in seen:
            out.append(Violation(path, "acyclicity", "node reachable more than once"))
            continue
        seen.add(id(node))
        if not (0 <= node.t < len(vocab)):
            out.append(Violation(path, "type", f"type index {node.t} outside vocabulary"))
        elif node.children and not vocab.is_internal(node.t):
            out.append(Violation(path, "kind", f"leaf type {vocab.name_of(node.t)!r} has children"))
        for name, v, bins in zip("xywh", node.box, grid.bins):
            if not (isinstance(v, int) and 0 <= v < bins):
                out.append(Violation(path, "geometry", f"{name}={v!r} outside [0, {bins - 1}]"))
        for i, c in reversed(list(enumerate(node.children))):
            stack.append((c, path + (i,)))
    return sorted(out, key=lambda v: (v.path, v.rule))


# --- layout JSON ----------------------------------------------------------


def node_from_json(d: dict, vocab: TypeVocabulary, grid: QuantGrid) -> LayoutNode:
    return LayoutNode(
        *quantize_box(d["box"], grid),
        vocab.index(d["type"]),
        tuple(node_from_json(c, vocab, grid) for c in d.get("children", ())),
    )


def tree_from_json(d: dict, vocab: TypeVocabulary, grid: QuantGrid | None = None) -> LayoutTree:
    grid = (grid or QuantGrid()).with_canvas(*d["canvas"])
    return LayoutTree(node_from_json(d["root"], vocab, grid), vocab, grid)


def tree_to_json(tree: LayoutTree) -> dict:
    def conv(n: LayoutNode) -> dict:
        return {
            "type": tree.vocabulary.name_of(n.t),
            "box": list(dequantize_box(n.box, tree.grid)),
            "children": [conv(c) for c in n.children],
        }

    return {"canvas": [tree.grid.canvas_w, tree.grid.canvas_h], "root": conv(tree.root)}


def dumps_tree(tree: LayoutTree) -> str:
    return json.dumps(tree_to_json(tree), sort_keys=True)
