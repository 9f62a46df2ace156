import copy
import math

import numpy as np
import pytest

from hgmn import tensor as T
from hgmn.alignment import align_all
from hgmn.checkpoint import (FORMAT_VERSION, MAGIC, decode_checkpoint,
                             encode_checkpoint, load_checkpoint, save_checkpoint)
from hgmn.config import PRESETS, format_config, load_config, parse_config_text
from hgmn.errors import ContractError, TrainingDiverged
from hgmn.hetgraph import load_graph
from hgmn.model import (HgmnModel, classification_metrics, forward, loss_and_metrics, prepare)
from hgmn.tensor import Tensor, backward
from hgmn.training import (gradient_check, make_checkpoint, relative_error, restore,
                           resume_state, train)
from oracles import distinct_key_document, permute_document


@pytest.fixture
def tiny_cfg(fixtures_dir):
    return load_config(fixtures_dir / "tiny.cfg")


@pytest.fixture
def check_cfg(fixtures_dir):
    return load_config(fixtures_dir / "gradcheck.cfg")


def _params(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


# ---------------------------------------------------------------- config

def test_presets():
    hgb = PRESETS["hgb"]
    assert (hgb.num_layers, hgb.hidden_dim, hgb.learning_rate, hgb.weight_decay,
            hgb.num_epochs, hgb.num_heads, hgb.metapath_attention_dim) == (2, 64, 5e-4, 1e-4, 150, 8, 128)
    large = PRESETS["large"]
    assert (large.num_layers, large.hidden_dim, large.learning_rate, large.weight_decay,
            large.num_epochs) == (4, 128, 3e-3, 5e-4, 300)


def test_config_text_round_trip():
    cfg = parse_config_text("preset = large\nseed = 9  # comment\nzoh_exact = false\n")
    assert cfg.hidden_dim == 128 and cfg.seed == 9 and cfg.zoh_exact is False
    assert parse_config_text(format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["hidden_dim = 10\nnum_heads = 4", "bogus = 1", "zoh_exact = maybe",
                                  "hidden_dim = ten", "preset = huge", "just words",
                                  "inner_order_mode = degree", "num_layers = 0"])
def test_config_errors(text):
    with pytest.raises(ContractError):
        parse_config_text(text)


# ---------------------------------------------------------------- forward

def test_logits_shape_and_finite(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    logits = forward(model, g12, prepare(g12, tiny_cfg))
    assert logits.shape == (12, 3)
    assert np.isfinite(logits.data).all()


def test_block_census(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    assert len(model.layers) == tiny_cfg.num_layers
    for layer in model.layers:
        assert len(layer.blocks()) == len(g12.node_types) + 1
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))


def test_zero_blocks_pass_alignment_through(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    model.zero_ssm_blocks()
    prep = prepare(g12, tiny_cfg)
    logits = forward(model, g12, prep)
    want = T.linear(align_all(model.align, g12, prep.plan), model.head_W, model.head_b)
    assert logits.data.tobytes() == want.data.tobytes()


def test_single_node_graph(tiny_cfg):
    doc = {"node_types": [{"name": "x", "feature_dim": 2}], "edge_types": [],
           "nodes": [{"id": 0, "type": "x", "features": [0.5, -1.0], "label": 0}], "edges": []}
    g = load_graph(doc)
    model = HgmnModel(g, tiny_cfg)
    logits = forward(model, g, prepare(g, tiny_cfg))
    assert logits.shape == (1, 1) and np.isfinite(logits.data).all()


def test_type_set_mismatch(g0, g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    with pytest.raises(ContractError):
        forward(model, g0, prepare(g0, tiny_cfg))


def test_unlabelled_graph_rejected(tiny_cfg):
    doc = {"node_types": [{"name": "x", "feature_dim": 1}], "edge_types": [],
           "nodes": [{"id": 0, "type": "x", "features": [1.0]}], "edges": []}
    with pytest.raises(ContractError):
        HgmnModel(load_graph(doc), tiny_cfg)


# ---------------------------------------------------------------- loss and metrics

def test_saturated_logits():
    labels = np.array([0, 2, 1, 2])
    logits = np.zeros((4, 3))
    logits[np.arange(4), labels] = 30.0
    loss, m = loss_and_metrics(Tensor(logits), labels, np.arange(4))
    assert float(loss.data) <= 1e-9
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 1.0


def test_uniform_logits_give_log_c():
    for c in (2, 3, 7):
        loss, _ = loss_and_metrics(Tensor(np.full((5, c), 0.3)), np.arange(5) % c, np.arange(5))
        assert abs(float(loss.data) - math.log(c)) <= 1e-15


def _f1_oracle(pred, labels, c):
    cm = [[0] * c for _ in range(c)]
    for y, p in zip(labels, pred):
        cm[y][p] += 1
    f1s = []
    for k in range(c):
        tp = cm[k][k]
        fp = sum(cm[j][k] for j in range(c)) - tp
        fn = sum(cm[k]) - tp
        if tp + fp + fn:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    TP = sum(cm[k][k] for k in range(c))
    total = len(labels)
    micro = 2 * TP / (2 * TP + 2 * (total - TP))   # every miss is one FP and one FN
    return TP / total, micro, sum(f1s) / len(f1s)


def test_micro_f1_equals_accuracy_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        labels, pred = rng.integers(0, c, n), rng.integers(0, c, n)
        m = classification_metrics(pred, labels, c)
        acc, micro, macro = _f1_oracle(pred, labels, c)
        assert abs(m["micro_f1"] - m["accuracy"]) <= 1e-12
        assert abs(m["accuracy"] - acc) <= 1e-12
        assert abs(m["micro_f1"] - micro) <= 1e-12
        assert abs(m["macro_f1"] - macro) <= 1e-12


def test_loss_mask_errors():
    logits = Tensor(np.zeros((3, 2)))
    with pytest.raises(ContractError):
        loss_and_metrics(logits, [0, 1, 0], [])
    with pytest.raises(ContractError):
        loss_and_metrics(logits, [0, -1, 0], [1])


# ---------------------------------------------------------------- training

def test_zero_learning_rate_is_a_fixed_point(g12, tiny_cfg):
    cfg = tiny_cfg.replace(learning_rate=0.0, num_epochs=3)
    model = HgmnModel(g12, cfg)
    before = _params(model)
    state = train(model, g12, cfg)
    after = _params(model)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert len({row.train_loss for row in state.history}) == 1


def test_same_seed_same_curves(g12, tiny_cfg):
    runs = []
    for _ in range(2):
        model = HgmnModel(g12, tiny_cfg)
        runs.append((train(model, g12, tiny_cfg).history, _params(model)))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_training_reduces_loss(g12, tiny_cfg):
    state = train(HgmnModel(g12, tiny_cfg), g12, tiny_cfg)
    assert len(state.history) == tiny_cfg.num_epochs
    assert state.history[-1].train_loss < state.history[0].train_loss
    assert 1 <= state.best_epoch <= tiny_cfg.num_epochs
    assert state.best_metric == max(r.val_macro_f1 for r in state.history)


def test_resume_reproduces_training_bitwise(g12, tiny_cfg):
    full = HgmnModel(g12, tiny_cfg)
    full_state = train(full, g12, tiny_cfg)

    half_cfg = tiny_cfg.replace(num_epochs=3)
    first = HgmnModel(g12, half_cfg)
    half_state = train(first, g12, half_cfg)
    last = decode_checkpoint(encode_checkpoint(make_checkpoint(first, half_state)))
    best = decode_checkpoint(encode_checkpoint(make_checkpoint(first, half_state, best=True)))

    resumed = HgmnModel(g12, tiny_cfg)
    state = resume_state(resumed, last, best)
    state = train(resumed, g12, tiny_cfg, state=state)
    assert state.history == full_state.history[3:]
    a, b = _params(full), _params(resumed)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert encode_checkpoint(make_checkpoint(full, full_state)) == \
        encode_checkpoint(make_checkpoint(resumed, state))
    assert encode_checkpoint(make_checkpoint(full, full_state, best=True)) == \
        encode_checkpoint(make_checkpoint(resumed, state, best=True))


def test_divergence_reports_epoch_and_parameter(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    model.head_b.data[0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(model, g12, tiny_cfg)
    assert info.value.epoch == 1
    assert info.value.worst_parameter is not None
    assert "epoch 1" in str(info.value)


def test_bad_splits(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    with pytest.raises(ContractError):
        train(model, g12, tiny_cfg, splits={"train": [0, 1], "val": []})
    with pytest.raises(ContractError):
        train(model, g12, tiny_cfg, splits={"train": [0, 1], "val": [1, 3]})


# ---------------------------------------------------------------- invariances

@pytest.mark.parametrize("seed", range(3))
def test_relabeling_invariance_of_logits(seed, tiny_cfg):
    doc = distinct_key_document(seed, n=8, feature_dim=3)
    perm = np.random.default_rng(seed + 9).permutation(8)
    g, h = load_graph(doc), load_graph(permute_document(doc, perm))
    a = forward(HgmnModel(g, tiny_cfg), g, prepare(g, tiny_cfg)).data
    b = forward(HgmnModel(h, tiny_cfg), h, prepare(h, tiny_cfg)).data
    np.testing.assert_allclose(b[perm], a, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("encoder", ["mean", "linear"])
def test_every_parameter_gets_gradient(g12, check_cfg, encoder):
    cfg = check_cfg.replace(instance_encoder=encoder)
    model = HgmnModel(g12, cfg)
    loss, _ = loss_and_metrics(forward(model, g12, prepare(g12, cfg)), g12.labels,
                               g12.splits["train"])
    model.zero_grad()
    backward(loss)
    dead = [p.name for p in model.parameters() if not np.abs(p.grad).max() > 0]
    assert dead == []


# ---------------------------------------------------------------- gradient check

def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


def test_gradcheck_with_zeroed_head(g12, check_cfg):
    model = HgmnModel(g12, check_cfg)
    model.head_W.data[:] = 0.0
    report = gradient_check(model, g12, max_coords=4)
    errs = [entry["max_rel_err"] for entry in report.values()]
    assert all(np.isfinite(errs)) and max(errs) <= 1e-4
    assert set(report) == set(model.named_parameters())


def test_gradcheck_richardson_trend(g12, check_cfg):
    """Truncation error of a central difference scales as eps**2.

    Doubling eps should quadruple the deviation from the tape gradient on
    coordinates where that deviation sits well above the roundoff floor.
    """
    model = HgmnModel(g12, check_cfg)
    r1 = gradient_check(model, g12, epsilon=1e-5, max_coords=10)
    r2 = gradient_check(model, g12, epsilon=2e-5, max_coords=10)
    ratios = []
    for name in r1:
        a = np.array(r1[name]["analytic"])
        e1 = np.abs(np.array(r1[name]["numeric"]) - a)
        e2 = np.abs(np.array(r2[name]["numeric"]) - a)
        keep = e1 > 1e-13
        ratios += (e2[keep] / e1[keep]).tolist()
    assert len(ratios) >= 3
    assert 3.5 <= float(np.median(ratios)) <= 4.5
    assert max(e["max_rel_err"] for e in r1.values()) <= 1e-4


def test_gradcheck_leaves_model_untouched(g12, check_cfg):
    model = HgmnModel(g12, check_cfg)
    before = _params(model)
    gradient_check(model, g12, max_coords=2)
    after = _params(model)
    assert all(before[k].tobytes() == after[k].tobytes() and after[k].dtype == np.float64
               for k in before)
    assert all(p.requires_grad for p in model.parameters())


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    state = train(model, g12, tiny_cfg.replace(num_epochs=2))
    ckpt = make_checkpoint(model, state)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert encode_checkpoint(loaded) == path.read_bytes()
    assert loaded.config == tiny_cfg
    assert loaded.meta["epoch"] == 2 and loaded.rng_state == model.rng_state
    other = HgmnModel(g12, tiny_cfg.replace(seed=99))
    restore(other, loaded)
    a, b = _params(model), _params(other)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loaded.adam.step == 2 and set(loaded.adam.m) == set(a)


def test_checkpoint_is_byte_stable(g12, tiny_cfg):
    blobs = []
    for _ in range(2):
        model = HgmnModel(g12, tiny_cfg)
        blobs.append(encode_checkpoint(make_checkpoint(model, train(model, g12, tiny_cfg))))
    assert blobs[0] == blobs[1]
    assert blobs[0].startswith(MAGIC)


def test_corrupt_checkpoints(g12, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    blob = encode_checkpoint(make_checkpoint(model, train(model, g12, tiny_cfg.replace(num_epochs=1))))
    with pytest.raises(ContractError):
        decode_checkpoint(b"NOTACKPT" + blob[8:])
    bumped = blob[:8] + (FORMAT_VERSION + 1).to_bytes(4, "little") + blob[12:]
    with pytest.raises(ContractError):
        decode_checkpoint(bumped)
    with pytest.raises(ContractError):
        decode_checkpoint(blob + b"\0" * 8)


def test_restore_rejects_foreign_checkpoint(g12, g0, tiny_cfg):
    model = HgmnModel(g12, tiny_cfg)
    ckpt = make_checkpoint(model, train(model, g12, tiny_cfg.replace(num_epochs=1)))
    small = HgmnModel(g12, tiny_cfg.replace(hidden_dim=4))
    with pytest.raises(ContractError):
        restore(small, ckpt)
    trimmed = copy.copy(ckpt)
    trimmed.params = dict(list(ckpt.params.items())[:-1])
    with pytest.raises(ContractError):
        restore(model, trimmed)
