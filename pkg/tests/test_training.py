import math

import numpy as np
import pytest
import torch

from layoutgen.conditions import TaskKind
from layoutgen.core import LayoutError
from layoutgen.corpus import SyntheticGrammarSpec, generate_synthetic, make_condition_set
from layoutgen.model import LayoutModel
from layoutgen.serde import NL, serialize
from layoutgen.training import (
    LOSS_NAMES,
    TrainConfig,
    build_targets,
    compute_losses,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    teacher_forced_accuracy,
    train,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SyntheticGrammarSpec(), 24, 0)


def test_targets_follow_sequence(six_tree):
    cond = make_condition_set(six_tree, "gent", 0)
    ex = build_targets(six_tree, cond)
    seq = serialize(six_tree)
    assert len(ex.b3) == len(seq)
    assert ex.b3.tolist() == [t is NL for t in seq]
    assert int(ex.b4.sum()) == cond.n
    assert sorted(ex.sel[ex.sel >= 0].tolist()) == list(range(cond.n))


def test_losses_are_finite_and_complete(corpus):
    torch.manual_seed(0)
    model = LayoutModel(tiny_config())
    conds = [make_condition_set(t, "completion", i) for i, t in enumerate(corpus[:4])]
    batch = make_batch(model, corpus[:4], conds, torch.Generator().manual_seed(0))
    with torch.no_grad():
        total, comp = compute_losses(model(batch), batch, 0.5)
    assert set(comp) == set(LOSS_NAMES) | {"kl"}
    assert all(math.isfinite(float(v)) for v in comp.values())
    assert float(total) == pytest.approx(sum(float(comp[k]) for k in LOSS_NAMES) + 0.5 * float(comp["kl"]))


def test_schedule_shapes():
    cfg = TrainConfig(lr=1e-3, min_lr_frac=0.1, beta=0.4, warmup_frac=0.5)
    assert cfg.lr_at(0, 10) == pytest.approx(1e-3)
    assert cfg.lr_at(9, 10) == pytest.approx(1e-4)
    assert cfg.beta_at(0, 10) == 0.0 and cfg.beta_at(5, 10) == pytest.approx(0.4)
    assert TrainConfig(schedule="constant").lr_at(7, 10) == TrainConfig().lr


def test_task_mix_validation():
    with pytest.raises(ValueError):
        TrainConfig(task_mix={"gent": 0.5, "geno": 0.4})
    with pytest.raises(Exception):
        TrainConfig(task_mix={"nonsense": 1.0})


def test_training_reduces_loss_and_is_deterministic(corpus, tmp_path):
    cfg = TrainConfig(epochs=6, batch_size=8, lr=3e-3, seed=3)
    a = train(corpus, tiny_config(d_model=32, d_ff=64, heads=4), cfg, out_dir=tmp_path / "a")
    b = train(corpus, tiny_config(d_model=32, d_ff=64, heads=4), cfg)
    assert a.epoch_losses == b.epoch_losses
    assert a.epoch_losses[-1] < a.epoch_losses[0]
    assert (tmp_path / "a" / "metrics.ndjson").read_text().count("\n") == len(a.history)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_round_trip(corpus, tmp_path):
    torch.manual_seed(0)
    model = LayoutModel(tiny_config()).eval()
    t = corpus[0]
    path = save_checkpoint(tmp_path / "m.pt", model, t.vocabulary, t.grid, step=5)
    m2, vocab, grid = load_checkpoint(path)
    assert vocab == t.vocabulary and grid == t.grid
    conds = [make_condition_set(t, "gent", 0)]
    with torch.no_grad():
        o1 = model(make_batch(model, [t], conds, sample=False))
        o2 = m2(make_batch(m2, [t], conds, sample=False))
    assert torch.equal(o1["b34"], o2["b34"])


def test_checkpoint_version_guard(tmp_path):
    torch.save({"state_dict": {}}, tmp_path / "bad.pt")
    with pytest.raises(LayoutError):
        load_checkpoint(tmp_path / "bad.pt")


def test_teacher_forced_accuracy_bounds(corpus):
    torch.manual_seed(0)
    model = LayoutModel(tiny_config()).eval()
    conds = [make_condition_set(t, "ugen", 0) for t in corpus[:6]]
    acc = teacher_forced_accuracy(model, corpus[:6], conds)
    assert 0.0 <= acc["overall"] <= 1.0 and set(acc) == {"overall", *"xywht"}


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train([], tiny_config(), TrainConfig(epochs=1))
