import json

import numpy as np
import pytest
import torch

from layoutgen.conditions import Condition, ConditionSet, InvalidTask
from layoutgen.core import QuantGrid, validate_tree
from layoutgen.corpus import SyntheticGrammarSpec, generate_synthetic, make_condition_set
from layoutgen.model import LayoutModel
from layoutgen.serde import NL, SeqNode, TokenSequence, deserialize, serialize
from layoutgen.tasks import (
    DecodeOptions,
    EmptyGeneration,
    ModelBundle,
    TaskRequest,
    TruncatedGeneration,
    conditions_from_json,
    conditions_to_json,
    generate,
    load_request,
    repair_sequence,
    run_task,
    structure_code_of,
)
from layoutgen.training import save_checkpoint

from conftest import FRAME, ICON, TEXT, V, tiny_config

GRID = QuantGrid()


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return ModelBundle(LayoutModel(tiny_config(d_model=32, d_ff=64, heads=4, max_seq=128)).eval(), V, GRID)


@pytest.fixture(scope="module")
def trees():
    return generate_synthetic(SyntheticGrammarSpec(), 40, 9)


def node(t=TEXT, b1=True, b2=True, x=1):
    return SeqNode(x, 1, 5, 5, t, b1, b2)


# --- repair -----------------------------------------------------------------------


def test_valid_sequence_passes_unchanged(six_seq):
    r = repair_sequence(six_seq)
    assert list(r.sequence) == list(six_seq) and r.log == []
    assert r.index_map == {i: i for i, t in enumerate(six_seq) if t is not NL}


def test_repair_closes_open_group():
    # root with two children, neither flagged as last
    seq = [node(FRAME, b1=False), NL, node(x=2, b2=False), node(x=3, b2=False)]
    r = repair_sequence(seq)
    assert r.sequence[-1].b2 and not r.sequence[-2].b2
    assert any("last-child" in m for m in r.log)


def test_repair_childless_internal_becomes_leaf():
    seq = [node(FRAME, b1=False), NL, node(FRAME, b1=False, b2=True)]
    r = repair_sequence(seq)
    assert r.sequence[-1].b1
    assert validate_tree(deserialize(r.sequence, V, GRID)) == []


def test_repair_drops_stray_separators_and_orphans():
    seq = [NL, node(FRAME, b1=False), NL, NL, node(x=2), node(x=3), NL, node(x=9)]
    r = repair_sequence(seq)
    assert [t is NL for t in r.sequence] == [False, True, False]
    assert r.index_map == {1: 0, 4: 2}
    assert len(r.log) >= 3


def test_repair_flags_root_as_last_child():
    r = repair_sequence([node(TEXT, b2=False)])
    assert r.sequence[0].b2 and r.log


def test_repair_empty_raises():
    with pytest.raises(EmptyGeneration):
        repair_sequence([NL, NL])


# --- generation ---------------------------------------------------------------------


def _sound(res):
    for entry in res.report:
        if entry.satisfied:
            tok = res.sequence[entry.position]
            assert res.conditions.attribute[entry.index].matches(tok.attrs)


@pytest.mark.parametrize("task", ["ugen", "gent", "gents", "completion", "geno"])
def test_generation_valid_sound_and_deterministic(bundle, trees, task):
    for i, t in enumerate(trees[:8]):
        cond = make_condition_set(t, task, i) if task != "ugen" else None
        a = run_task(task, bundle, cond, options=DecodeOptions(seed=i))
        b = run_task(task, bundle, cond, options=DecodeOptions(seed=i))
        assert list(a.sequence) == list(b.sequence)
        assert validate_tree(a.tree) == []
        assert deserialize(a.sequence, V, GRID) == a.tree
        _sound(a)


def test_sampling_reproducible_per_seed(bundle, trees):
    cond = make_condition_set(trees[0], "gent", 0)
    opts = DecodeOptions(mode="sample", temperature=1.2, seed=4)
    a = run_task("gent", bundle, cond, options=opts)
    b = run_task("gent", bundle, cond, options=opts)
    assert list(a.sequence) == list(b.sequence)


def test_org_members_share_a_parent(bundle, trees):
    seen = 0
    for i in range(30):
        t = trees[i % len(trees)]
        cond = make_condition_set(t, "geno", i)
        res = run_task("geno", bundle, cond, options=DecodeOptions(seed=i))
        for parents in res.org_parents():
            if parents is not None:
                seen += 1
                assert len(parents) == 1
    assert seen > 0


def test_budget_limits(bundle, trees):
    cond = make_condition_set(trees[1], "gent", 0)
    res = run_task("gent", bundle, cond, options=DecodeOptions(max_nodes=3))
    assert sum(tok is not NL for tok in res.sequence) <= 3
    assert validate_tree(res.tree) == []
    res = run_task("ugen", bundle, options=DecodeOptions(max_depth=1))
    assert len(res.tree.levels()) <= 2


def test_strict_truncation_raises(bundle, trees):
    t = max(trees, key=lambda x: len(serialize(x)))
    cond = make_condition_set(t, "gent", 0)
    opts = DecodeOptions(max_nodes=1, hold_for_conditions=True)
    res = run_task("gent", bundle, cond, options=opts)
    if res.truncated:
        with pytest.raises(TruncatedGeneration):
            run_task("gent", bundle, cond, options=DecodeOptions(max_nodes=1, strict=True))
    assert sum(tok is not NL for tok in res.sequence) == 1


def test_struct_transfer_self_consistency(bundle, trees):
    for i, t in enumerate(trees[:10]):
        cond = make_condition_set(t, "gent", i)
        first = run_task("gent", bundle, cond, options=DecodeOptions(seed=i))
        a = run_task("structtran", bundle, cond, reference=first.tree)
        b = run_task("structtran", bundle, cond, reference=first.tree)
        assert list(a.sequence) == list(b.sequence)
        assert validate_tree(a.tree) == []
        code = structure_code_of(bundle, first.sequence)
        assert torch.equal(a.z, code.mean)


def test_struct_extraction_keeps_best_round(bundle, trees):
    cond = make_condition_set(trees[2], "structextr", 0)
    best = run_task("structextr", bundle, cond, rounds=3)
    one = run_task("structextr", bundle, cond, rounds=1)
    assert best.n_satisfied >= one.n_satisfied
    with pytest.raises(ValueError):
        run_task("structextr", bundle, cond, rounds=0)


def test_task_argument_checks(bundle, trees):
    cond = make_condition_set(trees[0], "geno", 0)
    with pytest.raises(InvalidTask):
        run_task("gent", bundle, cond)
    with pytest.raises(InvalidTask):
        run_task("ugen", bundle, ConditionSet((Condition(t=TEXT),)))
    with pytest.raises(InvalidTask):
        run_task("structtran", bundle, ConditionSet((Condition(t=TEXT),)))
    with pytest.raises(InvalidTask):
        run_task("gent", bundle, None)
    with pytest.raises(ValueError):
        DecodeOptions(mode="beam")


def test_report_dict_shape(bundle, trees):
    res = run_task("completion", bundle, make_condition_set(trees[3], "completion", 0))
    d = res.report_dict()
    assert d["total"] == res.conditions.n and len(d["conditions"]) == d["total"]
    json.dumps(d)


# --- request files ------------------------------------------------------------------


def test_condition_json_round_trip():
    cond = ConditionSet((Condition(x=3, t=TEXT), Condition(w=10, h=4), Condition(t=ICON)), ((0, 2),))
    back = conditions_from_json(conditions_to_json(cond, V, GRID), V, GRID)
    assert back.attribute == cond.attribute and back.org == cond.org


def test_conditions_in_layout_units():
    cond = conditions_from_json({"canvas": [100, 200], "elements": [{"x": 50, "h": 199.9, "type": "Text"}]}, V, GRID)
    c = cond.attribute[0]
    assert (c.x, c.y, c.h, c.t) == (32, None, 63, TEXT)


def test_bad_group_is_invalid_task():
    with pytest.raises(InvalidTask):
        conditions_from_json({"elements": [{"type": "Text"}], "groups": [[0, 3]]}, V, GRID)


def test_request_file_runs(bundle, tmp_path, trees):
    req = {
        "task": "structtran",
        "seed": 2,
        "conditions": {"elements": [{"type": "Text"}, {"type": "Icon", "w": 40}]},
        "reference": json.loads(json.dumps(__import__("layoutgen.core", fromlist=["tree_to_json"]).tree_to_json(trees[0]))),
        "decode": {"max_nodes": 12},
    }
    p = tmp_path / "req.json"
    p.write_text(json.dumps(req))
    r = load_request(p, V, GRID)
    assert r.options.seed == 2 and r.options.max_nodes == 12
    res = r.run(bundle)
    assert validate_tree(res.tree) == []
    with pytest.raises(InvalidTask):
        TaskRequest.from_json({"conditions": {}}, V, GRID)


def test_bundle_loads_from_checkpoint(bundle, tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", bundle.model, V, GRID)
    b = ModelBundle.load(path)
    assert b.vocabulary == V and b.grid == GRID
    a1 = run_task("ugen", bundle)
    a2 = run_task("ugen", b)
    assert list(a1.sequence) == list(a2.sequence)
