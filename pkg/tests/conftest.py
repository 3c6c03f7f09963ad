import numpy as np
import pytest
import torch

from layoutgen.core import SYNTHETIC, LayoutNode, LayoutTree, QuantGrid
from layoutgen.model import LayoutModel, ModelConfig
from layoutgen.serde import NL, SeqNode, TokenSequence

V = SYNTHETIC
FRAME, LINEAR_H, LINEAR_V = V.index("Frame"), V.index("LinearH"), V.index("LinearV")
TEXT, IMAGE, ICON = V.index("Text"), V.index("Image"), V.index("Icon")


def six_node_tree() -> LayoutTree:
    """N1 -> (N2 -> N4, N3 -> (N5, N6)); N1..N3 internal, N4..N6 leaves."""
    n4 = LayoutNode(2, 2, 20, 10, TEXT)
    n5 = LayoutNode(34, 2, 10, 10, IMAGE)
    n6 = LayoutNode(46, 2, 10, 10, ICON)
    n2 = LayoutNode(1, 1, 30, 30, LINEAR_V, (n4,))
    n3 = LayoutNode(33, 1, 30, 30, LINEAR_H, (n5, n6))
    n1 = LayoutNode(0, 0, 63, 63, FRAME, (n2, n3))
    return LayoutTree(n1, V, QuantGrid())


def six_node_sequence() -> TokenSequence:
    t = six_node_tree()
    n1 = t.root
    n2, n3 = n1.children
    (n4,) = n2.children
    n5, n6 = n3.children

    def tok(n, b1, b2):
        return SeqNode(*n.box, n.t, b1, b2)

    return TokenSequence([
        tok(n1, False, True), NL,
        tok(n2, False, False), tok(n3, False, True), NL,
        tok(n4, True, True), tok(n5, True, False), tok(n6, True, True),
    ])


@pytest.fixture
def six_tree():
    return six_node_tree()


@pytest.fixture
def six_seq():
    return six_node_sequence()


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, d_ff=32, gen_layers=1, enc_layers=1, heads=2, d_z=8, max_seq=64)
    base.update(kw)
    return ModelConfig.for_layouts(V, QuantGrid(), **base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return LayoutModel(tiny_config()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (description, passed); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        desc, ok = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k}. {desc}")
