"""Level-order serialization of layout trees into flat token sequences.

A tree is written level by level. Within a level, nodes are grouped by parent
in the parents' order. Each node carries ``b1`` (contributed no children) and
``b2`` (last child of its parent; the root always has it), and ``NL`` tokens
separate adjacent levels. The flags alone are enough to rebuild the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence, Union

from .core import LayoutError, LayoutNode, LayoutTree, QuantGrid, TypeVocabulary, InvalidTree, validate_tree


class MalformedSequence(LayoutError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class SeqNode:
    x: int
    y: int
    w: int
    h: int
    t: int
    b1: bool
    b2: bool

    @property
    def attrs(self) -> tuple[int, int, int, int, int]:
        return (self.x, self.y, self.w, self.h, self.t)


class _NewLevel:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NL"

    def __reduce__(self):
        return (_NewLevel, ())


NL = _NewLevel()

Token = Union[SeqNode, _NewLevel]


class TokenSequence(Sequence[Token]):
    __slots__ = ("items",)

    def __init__(self, items: Iterable[Token] = ()):
        self.items: tuple[Token, ...] = tuple(items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return TokenSequence(self.items[k])
        return self.items[k]

    def __iter__(self) -> Iterator[Token]:
        return iter(self.items)

    def __eq__(self, other) -> bool:
        if isinstance(other, TokenSequence):
            return self.items == other.items
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.items)

    def __repr__(self) -> str:
        return f"TokenSequence({list(self.items)!r})"

    def nodes(self) -> list[tuple[int, SeqNode]]:
        return [(i, tok) for i, tok in enumerate(self.items) if tok is not NL]

    def dumps(self) -> str:
        """One token per line: ``x y w h t b1 b2`` or ``NL``."""
        lines = []
        for tok in self.items:
            if tok is NL:
                lines.append("NL")
            else:
                lines.append(f"{tok.x} {tok.y} {tok.w} {tok.h} {tok.t} {int(tok.b1)} {int(tok.b2)}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str) -> "TokenSequence":
        items: list[Token] = []
        for ln, line in enumerate(text.splitlines()):
            line = line.strip()
            if not line:
                continue
            if line == "NL":
                items.append(NL)
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"line {ln + 1}: expected 7 fields or NL, got {line!r}")
            x, y, w, h, t, b1, b2 = (int(p) for p in parts)
            items.append(SeqNode(x, y, w, h, t, bool(b1), bool(b2)))
        return cls(items)


def serialize(tree: LayoutTree) -> TokenSequence:
    violations = validate_tree(tree)
    if violations:
        raise InvalidTree("; ".join(map(str, violations)))
    items: list[Token] = []
    level: list[tuple[LayoutNode, bool]] = [(tree.root, True)]
    while level:
        if items:
            items.append(NL)
        nxt = []
        for node, last in level:
            items.append(SeqNode(node.x, node.y, node.w, node.h, node.t, not node.children, last))
            n = len(node.children)
            nxt.extend((c, i == n - 1) for i, c in enumerate(node.children))
        level = nxt
    return TokenSequence(items)


class Replay:
    """Incremental queue replay shared by recovery, prefix parsing and generation."""

    def __init__(self):
        self.parent_of: dict[int, int | None] = {}
        self.level_no = 1
        # parents awaiting children on the current level; None is the virtual root parent
        self.queue: list[int | None] = [None]
        self.level_internal: list[int] = []
        self.finished = False

    def feed(self, pos: int, tok: Token) -> None:
        if self.finished:
            raise MalformedSequence("token after terminating NL", pos)
        if tok is NL:
            if self.queue:
                raise MalformedSequence(f"{len(self.queue)} parent(s) still open at level break", pos)
            if not self.level_internal:
                self.finished = True
                return
            self.queue = list(self.level_internal)
            self.level_internal = []
            self.level_no += 1
            return
        if not self.queue:
            raise MalformedSequence("node after all parents of the level are closed", pos)
        parent = self.queue[0]
        self.parent_of[pos] = parent
        if not tok.b1:
            self.level_internal.append(pos)
        if tok.b2:
            self.queue.pop(0)
        elif parent is None:
            raise MalformedSequence("root must carry the last-child flag", pos)

    def check_complete(self, end: int) -> None:
        if self.finished:
            return
        if self.queue:
            raise MalformedSequence(f"{len(self.queue)} parent group(s) never closed", end)
        if self.level_internal:
            raise MalformedSequence(f"{len(self.level_internal)} internal node(s) without children", end)

    @property
    def pending_parent(self) -> int | None:
        return self.queue[0] if self.queue else None


def parent_indices(seq: Sequence[Token], complete: bool = True) -> dict[int, int | None]:
    """Parent position of every node position in ``seq`` (None for the root)."""
    r = Replay()
    for pos, tok in enumerate(seq):
        r.feed(pos, tok)
    if complete:
        if not len(seq):
            raise MalformedSequence("empty sequence", 0)
        r.check_complete(len(seq))
    return r.parent_of


def parent_index_of(seq: Sequence[Token], k: int) -> int | None:
    if not (0 <= k < len(seq)) or seq[k] is NL:
        raise ValueError(f"position {k} is not a node")
    return parent_indices(seq[: k + 1], complete=False)[k]


def deserialize(seq: Sequence[Token], vocabulary: TypeVocabulary, grid: QuantGrid) -> LayoutTree:
    parents = parent_indices(seq)
    kids: dict[int, list[int]] = {}
    for pos, par in parents.items():
        if par is not None:
            kids.setdefault(par, []).append(pos)

    def build(pos: int) -> LayoutNode:
        tok = seq[pos]
        return LayoutNode(*tok.attrs, tuple(build(c) for c in kids.get(pos, ())))

    return LayoutTree(build(0), vocabulary, grid)


def extract_structure_sequence(seq: Sequence[Token]) -> TokenSequence:
    """Drop every leaf (b1) node, keeping the root.

    Surviving nodes get their flags recomputed: the new final node of each
    parent group takes ``b2`` and a parent left without children takes ``b1``.
    Levels that become empty disappear together with their separators.
    """
    parents = parent_indices(seq)
    keep = [pos for pos, _ in TokenSequence(seq).nodes() if pos == 0 or not seq[pos].b1]
    keep_set = set(keep)
    kept_children: dict[int, list[int]] = {}
    for pos in keep:
        if parents[pos] is not None:
            kept_children.setdefault(parents[pos], []).append(pos)
    last_child = {ch[-1] for ch in kept_children.values()}

    levels: list[list[Token]] = [[]]
    for pos, tok in enumerate(seq):
        if tok is NL:
            levels.append([])
        elif pos in keep_set:
            levels[-1].append(
                replace(tok, b1=pos not in kept_children, b2=pos == 0 or pos in last_child)
            )
    out: list[Token] = []
    for lvl in levels:
        if not lvl:
            continue
        if out:
            out.append(NL)
        out.extend(lvl)
    return TokenSequence(out)
