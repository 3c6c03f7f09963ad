import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from layoutgen.conditions import Condition, ConditionSet, InvalidTask, TaskKind
from layoutgen.core import RICO, SYNTHETIC, validate_tree
from layoutgen.corpus import (
    CorpusConfig,
    IngestError,
    SyntheticGrammarSpec,
    convert_rico_view_hierarchy,
    generate_synthetic,
    ingest_rico_like,
    make_condition_set,
    read_corpus,
    shuffle_structure,
    split,
    write_corpus,
)
from layoutgen.metrics import overlap_score, node_box, s_inclusion
from layoutgen.serde import parent_indices, serialize

from conftest import six_node_tree

FIXTURES = Path(__file__).parent / "fixtures" / "layouts"


def _layout(n_children):
    kids = [{"type": "Text", "box": [10 * i, 0, 8, 8]} for i in range(n_children)]
    return {"canvas": [100, 100], "root": {"type": "Frame", "box": [0, 0, 100, 100], "children": kids}}


def test_empty_directory(tmp_path):
    trees, report = ingest_rico_like(tmp_path, CorpusConfig())
    assert trees == [] and report.kept == 0


def test_node_cap_boundary(tmp_path):
    (tmp_path / "a.layout.json").write_text(json.dumps(_layout(3)))
    trees, report = ingest_rico_like(tmp_path, CorpusConfig(max_nodes=3))
    assert trees == [] and (report.kept, report.dropped) == (0, 1)
    trees, report = ingest_rico_like(tmp_path, CorpusConfig(max_nodes=4))
    assert len(trees) == 1


def test_hand_written_fixtures_are_valid():
    trees, report = ingest_rico_like(FIXTURES, CorpusConfig(max_nodes=100, max_depth=10))
    assert len(trees) == 20 and report.dropped == 0
    assert all(validate_tree(t) == [] for t in trees)


def test_schema_error_carries_pointer(tmp_path):
    bad = _layout(2)
    bad["root"]["children"][1]["box"] = [1, 2, 3]
    f = tmp_path / "bad.layout.json"
    f.write_text(json.dumps(bad))
    with pytest.raises(IngestError) as e:
        ingest_rico_like(f, CorpusConfig())
    assert e.value.pointer == "/root/children/1/box"


def test_unknown_types_are_dropped_with_subtree(tmp_path):
    d = _layout(2)
    d["root"]["children"].append({"type": "Carousel", "box": [0, 50, 50, 50],
                                  "children": [{"type": "Text", "box": [1, 51, 5, 5]}]})
    (tmp_path / "x.layout.json").write_text(json.dumps(d))
    (tree,), report = ingest_rico_like(tmp_path, CorpusConfig())
    assert len(tree) == 3 and report.dropped_nodes == 2


def test_offscreen_boxes_are_clipped(tmp_path):
    d = _layout(1)
    d["root"]["children"][0]["box"] = [90, 90, 40, 40]
    (tmp_path / "x.layout.json").write_text(json.dumps(d))
    (tree,), report = ingest_rico_like(tmp_path, CorpusConfig())
    assert report.clipped_boxes == 1 and validate_tree(tree) == []


def test_rico_converter_output_ingests(tmp_path):
    raw = {"class": "android.widget.FrameLayout", "bounds": [0, 0, 1440, 2560], "children": [
        {"componentLabel": "Text", "bounds": [10, 10, 500, 100]},
        {"class": "android.widget.LinearLayout", "bounds": [0, 200, 1440, 800],
         "children": [{"componentLabel": "Icon", "bounds": [20, 220, 120, 320]}]},
    ]}
    (tmp_path / "r.layout.json").write_text(json.dumps(convert_rico_view_hierarchy(raw)))
    (tree,), _ = ingest_rico_like(tmp_path, CorpusConfig(vocabulary=RICO))
    assert [RICO.name_of(n.t) for n in tree.nodes()] == ["FrameLayout", "Text", "LinearLayout", "Icon"]


# --- synthetic grammar -------------------------------------------------------------------


def test_synthetic_zero_and_determinism():
    spec = SyntheticGrammarSpec()
    assert generate_synthetic(spec, 0, 1) == []
    assert generate_synthetic(spec, 50, 3) == generate_synthetic(spec, 50, 3)
    assert generate_synthetic(spec, 50, 3) != generate_synthetic(spec, 50, 4)


def test_synthetic_corpus_geometry():
    spec = SyntheticGrammarSpec()
    trees = generate_synthetic(spec, 2000, 0)
    assert all(validate_tree(t) == [] for t in trees)
    assert all(len(t) <= spec.max_nodes and t.depth <= spec.max_depth for t in trees)
    assert np.mean([s_inclusion(t).score for t in trees]) == 1.0
    linear = {SYNTHETIC.index("LinearH"), SYNTHETIC.index("LinearV")}
    overlaps = [overlap_score([node_box(c, t.grid) for c in kids])
                for t in trees for p, kids in t.sibling_sets() if p.t in linear]
    assert overlaps and max(overlaps) == 0.0


def test_grid_and_list_children_are_equal_sized():
    trees = generate_synthetic(SyntheticGrammarSpec(), 300, 2)
    same = {SYNTHETIC.index("Grid"), SYNTHETIC.index("List")}
    for t in trees:
        for p, kids in t.sibling_sets():
            if p.t in same:
                assert len({(c.w, c.h) for c in kids}) == 1


def test_shuffled_structure_keeps_elements():
    rng = np.random.default_rng(0)
    t = generate_synthetic(SyntheticGrammarSpec(), 1, 5)[0]
    s = shuffle_structure(t, rng)
    assert validate_tree(s) == []
    assert sorted((n.box, n.t) for n in s.nodes()) == sorted((n.box, n.t) for n in t.nodes())


# --- splits ------------------------------------------------------------------------


def test_split_sizes():
    trees = generate_synthetic(SyntheticGrammarSpec(), 10, 0)
    tr, te = split(trees, CorpusConfig())
    assert (len(tr), len(te)) == (9, 1)
    tr, te = split(trees[:1], CorpusConfig())
    assert (len(tr), len(te)) == (1, 0)


def test_split_is_a_deterministic_partition():
    trees = generate_synthetic(SyntheticGrammarSpec(), 2000, 0)
    a = split(trees, CorpusConfig(seed=4))
    b = split(trees, CorpusConfig(seed=4))
    assert a == b
    ids = lambda xs: sorted(id(x) for x in xs)
    assert ids(a[0] + a[1]) == ids(trees)
    assert (len(a[0]), len(a[1])) == (1800, 200)
    assert split(trees, CorpusConfig(split_ratio=Fraction(4)))[1].__len__() == 400


def test_split_rejects_empty():
    with pytest.raises(ValueError):
        split([], CorpusConfig())


def test_corpus_directory_round_trip(tmp_path):
    trees = generate_synthetic(SyntheticGrammarSpec(), 30, 1)
    write_corpus(trees, tmp_path)
    cfg = CorpusConfig()
    assert read_corpus(tmp_path, cfg) == trees
    assert len(read_corpus(tmp_path, cfg, "train")) == 27


# --- condition recipes -------------------------------------------------------------------


def test_ugen_has_no_conditions():
    c = make_condition_set(six_node_tree(), TaskKind.UGEN, 0)
    assert c.n == 0 and c.m == 0


def test_gent_on_six_node_tree():
    t = six_node_tree()
    c = make_condition_set(t, "gent", 0)
    n2, n3 = t.root.children
    leaves = [n2.children[0], *n3.children]
    assert [cond.attrs for cond in c.attribute] == [(None,) * 4 + (n.t,) for n in leaves]
    assert c.provenance == (5, 6, 7)


def test_gents_keeps_sizes_and_types():
    t = next(t for t in generate_synthetic(SyntheticGrammarSpec(), 200, 0) if len(t.leaves()) == 5)
    c = make_condition_set(t, "gents", 0)
    assert c.n == 5
    assert all(cond.x is None and cond.y is None and None not in (cond.w, cond.h, cond.t) for cond in c.attribute)


def test_structextr_and_completion():
    t = generate_synthetic(SyntheticGrammarSpec(), 1, 9)[0]
    seq = serialize(t)
    full = make_condition_set(t, "structextr", 0)
    assert [c.attrs for c in full.attribute] == [seq[p].attrs for p in full.provenance]
    comp = make_condition_set(t, "completion", 0)
    assert 1 <= comp.n <= max(1, full.n - 1)
    assert comp.attribute == full.attribute[: comp.n]


def test_geno_groups_are_true_sibling_sets():
    trees = generate_synthetic(SyntheticGrammarSpec(), 100, 0)
    for i, t in enumerate(trees):
        c = make_condition_set(t, "geno", i)
        seq = serialize(t)
        parents = parent_indices(seq)
        for g in c.org:
            assert len({parents[c.provenance[k]] for k in g}) == 1


def test_conditions_only_target_leaves():
    trees = generate_synthetic(SyntheticGrammarSpec(), 100, 1)
    for i, t in enumerate(trees):
        seq = serialize(t)
        for task in ("gent", "gents", "completion", "structextr", "geno"):
            c = make_condition_set(t, task, i)
            assert all(seq[p].b1 for p in c.provenance)


def test_unknown_task():
    with pytest.raises(InvalidTask):
        make_condition_set(six_node_tree(), "layoutify", 0)


def test_condition_set_validation():
    with pytest.raises(ValueError):
        ConditionSet((Condition(t=1),), ((0,),))
    with pytest.raises(ValueError):
        ConditionSet((Condition(t=1), Condition(t=2)), ((0, 2),))
