"""Schedule, optimizer, and the seeded training loop."""

import math

import numpy as np
import pytest

from icdlm import (
    ICDSequence,
    NumericError,
    SchemaError,
    TrainState,
    lr_at,
    make_example,
    optimizer_step,
    read_loss_history,
    sample_examples,
    split_anchor_set,
    train,
    write_loss_history,
)
from icdlm.construction import build_dataset
from icdlm.records import ConstructionConfig, ConstructionRecord, ModelConfig, TrainingConfig
from icdlm.training import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, _check_finite, build_training_rows
from icdlm.model import Vocabulary, init_params


SMALL_MODEL = ModelConfig(arch="transformer", d_model=16, heads=2, layers=1, ffn_mult=2)


@pytest.fixture(scope="module")
def training_inputs():
    from icdlm import world_generate

    world = world_generate(t=2, c=2, f=3, sigma=0.8, gamma=0.9, seed=10)
    pool = sample_examples(world, 30, seed=1)
    anchors, support = split_anchor_set(pool, 8, seed=2)
    cfg = ConstructionConfig(n_anchors=8, m=10, strategy="random", k=2, b=2, seed=3)
    records = build_dataset(world, anchors, support, cfg)
    return records, anchors, support


# ---------------------------------------------------------------------------
# schedule


def test_lr_at_knots():
    base = 0.4
    total = 30
    # warmup_fraction 1/3 -> ceil(10) warmup steps
    assert lr_at(0, total, base, 1 / 3) == 0.0
    assert lr_at(10, total, base, 1 / 3) == pytest.approx(base, abs=1e-15)
    assert lr_at(30, total, base, 1 / 3) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(20, total, base, 1 / 3) == pytest.approx(base / 2, abs=1e-12)


def test_lr_at_warmup_is_linear():
    vals = [lr_at(s, 100, 1.0, 0.1) for s in range(11)]
    np.testing.assert_allclose(np.diff(vals[:10]), 0.1, atol=1e-15)
    assert vals[10] == pytest.approx(1.0)


def test_lr_at_continuous_at_boundary():
    base, total, frac = 0.3, 57, 0.17
    warmup = math.ceil(frac * total)
    left = lr_at(warmup - 1, total, base, frac)
    right = lr_at(warmup, total, base, frac)
    assert abs(right - left) <= base / warmup + 1e-12


def test_lr_at_no_warmup():
    assert lr_at(0, 10, 0.5, 0.0) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# optimizer


def test_optimizer_noop_with_zero_grads():
    params = init_params(SMALL_MODEL, Vocabulary(4), 3, seed=0)
    before = {k: v.copy() for k, v in params.tensors.items()}
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    state = TrainState()
    optimizer_step(params, grads, state, lr=0.1, weight_decay=0.0)
    assert state.step == 1
    for k in before:
        np.testing.assert_array_equal(params.tensors[k], before[k])


def test_optimizer_hand_trace_two_steps():
    # single scalar parameter, explicit AdamW recurrence written out by hand
    params = init_params(SMALL_MODEL, Vocabulary(4), 3, seed=0)
    name = "head"
    p0 = 0.7
    params.tensors[name][:] = 0.0
    params.tensors[name][0, 0] = p0
    lr, wd = 0.05, 0.1
    g1, g2 = 0.3, -0.2

    p = p0
    m = v = 0.0
    for t, g in ((1, g1), (2, g2)):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        p *= 1 - lr * wd
        p -= lr * (m / (1 - ADAM_BETA1**t)) / (math.sqrt(v / (1 - ADAM_BETA2**t)) + ADAM_EPS)

    state = TrainState()
    for g in (g1, g2):
        grads = {k: np.zeros_like(t_) for k, t_ in params.tensors.items()}
        grads[name][0, 0] = g
        optimizer_step(params, grads, state, lr=lr, weight_decay=wd)
    assert params.tensors[name][0, 0] == pytest.approx(p, abs=1e-12)


def test_weight_decay_only_shrinks():
    params = init_params(SMALL_MODEL, Vocabulary(4), 3, seed=1)
    norm_before = float(np.linalg.norm(params.tensors["head"]))
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    state = TrainState()
    for _ in range(3):
        optimizer_step(params, grads, state, lr=0.1, weight_decay=0.5)
    assert float(np.linalg.norm(params.tensors["head"])) < norm_before


def test_frozen_tensors_untouched_by_optimizer():
    cfg = ModelConfig(arch="transformer", d_model=16, heads=2, layers=1,
                      ffn_mult=2, adapter=True, encoder_trainable=False)
    params = init_params(cfg, Vocabulary(4), 3, seed=2)
    before = params.tensors["proj"].copy()
    grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
    optimizer_step(params, grads, TrainState(), lr=0.1, weight_decay=0.3)
    np.testing.assert_array_equal(params.tensors["proj"], before)


# ---------------------------------------------------------------------------
# row building


def test_build_rows_shape_and_order(training_inputs):
    records, anchors, support = training_inputs
    vocab = Vocabulary(len(support))
    data = build_training_rows(records, {a.id: a for a in anchors}, vocab, "vqa")
    assert data.tokens.shape == (len(records) * 2, 2 + 2 + 1)
    assert data.tokens[0, 0] == vocab.bos
    assert data.tokens[0, 1] == vocab.query
    assert (data.tokens[:, -1] == vocab.eos).all()
    assert data.q_txt is not None


def test_build_rows_rejects_mixed_k(training_inputs):
    records, anchors, _ = training_inputs
    vocab = Vocabulary(20)
    broken = list(records) + [
        ConstructionRecord(anchor_id=records[-1].anchor_id,
                           sequences=(ICDSequence((0, 1, 2), -1.0),))
    ]
    with pytest.raises(SchemaError, match="mixed"):
        build_training_rows(broken, {a.id: a for a in anchors}, vocab, "vqa")


def test_build_rows_rejects_unknown_anchor(training_inputs):
    records, anchors, _ = training_inputs
    with pytest.raises(SchemaError, match="anchor"):
        build_training_rows(records, {}, Vocabulary(20), "vqa")


# ---------------------------------------------------------------------------
# the loop


def test_single_record_single_step():
    from icdlm import world_generate

    world = world_generate(t=2, c=2, f=3, sigma=0.8, seed=4)
    pool = sample_examples(world, 6, seed=0)
    anchors, support = split_anchor_set(pool, 1, seed=0)
    cfg = ConstructionConfig(n_anchors=1, m=5, strategy="random", k=2, b=1, seed=0)
    records = build_dataset(world, anchors, support, cfg)
    tcfg = TrainingConfig(lr=1e-3, weight_decay=0.0, epochs=1, batch_size=1,
                          warmup_fraction=0.0, seed=0)
    _, history, state = train(SMALL_MODEL, records, anchors, support, tcfg)
    assert len(history) == 1
    assert state.step == 1


def test_train_deterministic_across_runs(training_inputs):
    records, anchors, support = training_inputs
    tcfg = TrainingConfig(lr=1e-3, weight_decay=1e-3, epochs=2, batch_size=4,
                          warmup_fraction=0.1, seed=7)
    p1, h1, _ = train(SMALL_MODEL, records, anchors, support, tcfg)
    p2, h2, _ = train(SMALL_MODEL, records, anchors, support, tcfg)
    assert h1 == h2
    for name in p1.tensors:
        assert p1.tensors[name].tobytes() == p2.tensors[name].tobytes()


def test_train_seed_changes_outcome(training_inputs):
    records, anchors, support = training_inputs
    a = TrainingConfig(lr=1e-3, weight_decay=0.0, epochs=1, batch_size=4,
                       warmup_fraction=0.0, seed=0)
    b = TrainingConfig(lr=1e-3, weight_decay=0.0, epochs=1, batch_size=4,
                       warmup_fraction=0.0, seed=1)
    pa, _, _ = train(SMALL_MODEL, records, anchors, support, a)
    pb, _, _ = train(SMALL_MODEL, records, anchors, support, b)
    assert any(
        pa.tensors[n].tobytes() != pb.tensors[n].tobytes() for n in pa.tensors
    )


def test_history_lr_follows_schedule(training_inputs):
    records, anchors, support = training_inputs
    tcfg = TrainingConfig(lr=2e-3, weight_decay=0.0, epochs=3, batch_size=4,
                          warmup_fraction=0.25, seed=5)
    _, history, _ = train(SMALL_MODEL, records, anchors, support, tcfg)
    total = len(history)
    for step, lr, _loss in history:
        assert lr == pytest.approx(lr_at(step - 1, total, 2e-3, 0.25), abs=1e-15)


def test_check_finite_names_offending_tensor():
    grads = {"tok": np.zeros(2), "head": np.array([1.0, np.nan])}
    with pytest.raises(NumericError, match="head"):
        _check_finite(0.5, grads, step=3)
    with pytest.raises(NumericError, match="loss"):
        _check_finite(float("inf"), {"tok": np.zeros(2)}, step=3)


def test_loss_history_round_trip(tmp_path):
    history = [(1, 0.001, 2.5), (2, 0.002, 2.25)]
    path = tmp_path / "hist.jsonl"
    write_loss_history(history, path, {"note": "x"})
    loaded, meta = read_loss_history(path)
    assert loaded == history
    assert meta["note"] == "x"
