"""SVG rendering of layouts and their hierarchy levels."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from xml.sax.saxutils import quoteattr

from .core import LayoutNode, LayoutTree, dequantize_box

PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#17becf",
)


class LevelMode(str, Enum):
    VISIBLE = "visible-only"
    PER_LEVEL = "per-level"
    OVERLAY = "overlay"


def type_color(name: str) -> str:
    digest = hashlib.sha256(name.encode()).digest()
    return PALETTE[int.from_bytes(digest[:4], "big") % len(PALETTE)]


@dataclass(frozen=True)
class RenderSpec:
    width: int = 360
    height: int = 640
    mode: LevelMode = LevelMode.VISIBLE
    stroke_width: float = 1.0
    # per-level panels sit side by side with this gap, in pixels
    gap: int = 12

    def __post_init__(self):
        object.__setattr__(self, "mode", LevelMode(self.mode))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("canvas size must be positive")


def _rect(node: LayoutNode, tree: LayoutTree, spec: RenderSpec, dx: float = 0.0, opacity: float = 0.6) -> str:
    x, y, w, h = dequantize_box(node.box, tree.grid)
    sx, sy = spec.width / tree.grid.canvas_w, spec.height / tree.grid.canvas_h
    name = tree.vocabulary.name_of(node.t)
    c = type_color(name)
    return (
        f'<rect x="{dx + x * sx:.3f}" y="{y * sy:.3f}" width="{w * sx:.3f}" height="{h * sy:.3f}" '
        f'fill="{c}" fill-opacity="{opacity:g}" stroke="{c}" stroke-width="{spec.stroke_width:g}" '
        f"data-type={quoteattr(name)}/>"
    )


def render_svg(tree: LayoutTree, spec: RenderSpec = RenderSpec()) -> str:
    """Deterministic SVG document for ``tree``.

    ``visible-only`` draws the leaves; ``per-level`` draws one panel group per
    depth next to each other; ``overlay`` stacks translucent level groups.
    """
    levels = tree.levels()
    W, H = spec.width, spec.height
    body: list[str] = []
    if spec.mode is LevelMode.VISIBLE:
        total_w = W
        body.append('<g class="visible">')
        body.extend(_rect(n, tree, spec) for n in tree.leaves())
        body.append("</g>")
    elif spec.mode is LevelMode.PER_LEVEL:
        total_w = len(levels) * W + (len(levels) - 1) * spec.gap
        for d, level in enumerate(levels):
            dx = d * (W + spec.gap)
            body.append(f'<g class="level" data-depth="{d}">')
            body.extend(_rect(n, tree, spec, dx, opacity=0.8) for n in level)
            body.append("</g>")
    else:
        total_w = W
        step = 0.5 / max(len(levels), 1)
        for d, level in enumerate(levels):
            body.append(f'<g class="level" data-depth="{d}">')
            body.extend(_rect(n, tree, spec, opacity=0.15 + step * d) for n in level)
            body.append("</g>")
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{total_w}" height="{H}" '
        f'viewBox="0 0 {total_w} {H}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"
