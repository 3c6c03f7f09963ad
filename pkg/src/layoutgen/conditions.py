"""Element conditions and task kinds."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .core import LayoutError


class InvalidTask(LayoutError):
    pass


class TaskKind(str, Enum):
    GENT = "gent"
    GENTS = "gents"
    UGEN = "ugen"
    COMPLETION = "completion"
    STRUCTEXTR = "structextr"
    GENO = "geno"
    STRUCTTRAN = "structtran"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidTask(f"unknown task {value!r}") from None


TRAINING_REGIMES = (
    TaskKind.UGEN,
    TaskKind.GENT,
    TaskKind.GENTS,
    TaskKind.COMPLETION,
    TaskKind.STRUCTEXTR,
    TaskKind.GENO,
)


@dataclass(frozen=True)
class Condition:
    """Constraint on one element; ``None`` stands for the mask token."""

    x: Optional[int] = None
    y: Optional[int] = None
    w: Optional[int] = None
    h: Optional[int] = None
    t: Optional[int] = None

    @property
    def attrs(self) -> tuple[Optional[int], ...]:
        return (self.x, self.y, self.w, self.h, self.t)

    def matches(self, attrs: Sequence[int]) -> bool:
        return all(c is None or c == a for c, a in zip(self.attrs, attrs))

    def to_dict(self) -> dict:
        return {k: v for k, v in zip("xywht", self.attrs) if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(**{k: (None if d.get(k) is None else int(d[k])) for k in "xywht"})


@dataclass(frozen=True)
class ConditionSet:
    attribute: tuple[Condition, ...] = ()
    org: tuple[tuple[int, ...], ...] = ()
    # serialized position of the node each attribute condition was derived from
    provenance: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        n = len(self.attribute)
        for group in self.org:
            if len(group) < 2:
                raise ValueError(f"organization group {group} needs at least two members")
            if len(set(group)) != len(group) or any(not (0 <= i < n) for i in group):
                raise ValueError(f"organization group {group} references invalid conditions")
        if self.provenance is not None and len(self.provenance) != n:
            raise ValueError("provenance must cover every attribute condition")

    @property
    def n(self) -> int:
        return len(self.attribute)

    @property
    def m(self) -> int:
        return len(self.org)

    def __len__(self) -> int:
        return self.n + self.m

    def to_dict(self) -> dict:
        return {
            "attribute": [c.to_dict() for c in self.attribute],
            "org": [list(g) for g in self.org],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSet":
        return cls(
            tuple(Condition.from_dict(c) for c in d.get("attribute", ())),
            tuple(tuple(int(i) for i in g) for g in d.get("org", ())),
        )
