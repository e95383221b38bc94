import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from treeattn.errors import ConfigError, DataError, NumericError
from treeattn.model import ModelConfig, TreeTransformer, Vocab
from treeattn.synth import evaluate, make_synthetic_dataset, random_expression
from treeattn.tensor import Tensor
from treeattn.train import (
    Adam,
    RunReport,
    TrainPlan,
    attention_mass_stats,
    build_vocabs,
    evaluate_accuracy,
    grad_check_model,
    load_classifier,
    read_sst,
    train_classifier,
)
from treeattn.treebank import Example, balanced_tree, parse_bracketed

SMALL = ModelConfig(d=8, d_ffn=16, layers_enc=1, heads=2, hier_size=6, dropout=0.0)


def quick_plan(**kw):
    base = dict(lr=3e-3, warmup=5, max_updates=30, batch_tokens=40, eval_every=10)
    base.update(kw)
    return TrainPlan(**base)


# ---------------------------------------------------------------- schedule and optimizer


def test_warmup_then_inverse_sqrt():
    p = TrainPlan(lr=1.0, warmup=4, max_updates=100)
    assert [p.lr_at(s) for s in (1, 2, 4)] == [0.25, 0.5, 1.0]
    assert p.lr_at(16) == pytest.approx(0.5)
    assert TrainPlan(lr=0.3, warmup=0).lr_at(7) == 0.3


@pytest.mark.parametrize("kw", [dict(lr=-1), dict(batch_tokens=0), dict(warmup=10, max_updates=5)])
def test_plan_validation(kw):
    with pytest.raises(ConfigError):
        TrainPlan(**kw).validate()


def test_zero_learning_rate_leaves_parameters_unchanged():
    w = Tensor(np.arange(3.0), requires_grad=True)
    opt = Adam([w], TrainPlan(lr=0.0, warmup=0))
    opt.step({w: np.ones(3)})
    np.testing.assert_array_equal(w.data, np.arange(3.0))


def test_adam_first_step_moves_by_lr():
    w = Tensor(np.zeros(2), requires_grad=True)
    Adam([w], TrainPlan(lr=0.1, warmup=0)).step({w: np.array([3.0, -0.5])})
    np.testing.assert_allclose(w.data, [-0.1, 0.1], rtol=1e-7)


# ---------------------------------------------------------------- synthetic task


def test_synthetic_examples():
    assert evaluate(parse_bracketed("(NEG (x +1))")) == -1
    assert evaluate(parse_bracketed("(MAX (x -1) (MIN (x +1) (x -1)))")) == -1
    assert evaluate(parse_bracketed("(MIN (x +1) (NEG (MIN (x -1) (x +1))))")) == 1


def test_synthetic_labels_balanced():
    data = make_synthetic_dataset(seed=0, size=10_000)
    share = np.mean([ex.label == "+1" for ex in data])
    assert 0.45 <= share <= 0.55


def test_synthetic_seed_determinism():
    a = [str(e.tree) for e in make_synthetic_dataset(3, 50)]
    b = [str(e.tree) for e in make_synthetic_dataset(3, 50)]
    assert a == b


@given(st.integers(0, 2**20), st.integers(1, 4))
def test_expression_height_bound(seed, depth):
    t = random_expression(np.random.default_rng(seed), depth)

    def height(n):
        # operator levels only; the (x ±1) preterminal does not count
        if n.label == "x":
            return 0
        return 1 + max(height(c) for c in n.children)

    assert 1 <= height(t) <= depth


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def small_data():
    data = make_synthetic_dataset(seed=1, size=60, depth=2)
    return data[:40], data[40:]


def test_same_seed_same_loss_curve(small_data):
    train, dev = small_data
    _, r1 = train_classifier(SMALL, quick_plan(), train, dev)
    _, r2 = train_classifier(SMALL, quick_plan(), train, dev)
    assert r1.losses == r2.losses and len(r1.losses) == 30
    assert r1.evals == r2.evals


def test_training_reduces_loss(small_data):
    train, dev = small_data
    _, r = train_classifier(SMALL, quick_plan(max_updates=80, lr=1e-2), train, dev)
    assert np.mean(r.losses[-10:]) < np.mean(r.losses[:10])


def test_report_contents(small_data):
    train, dev = small_data
    ck, r = train_classifier(SMALL, quick_plan(), train, dev)
    assert [s for s, _ in r.evals] == [10, 20, 30]
    assert r.best_dev_accuracy == max(a for _, a in r.evals)
    assert sum(r.op_counts.values()) > 0
    assert r.attention_mass["node_mass"] + r.attention_mass["leaf_mass"] == pytest.approx(1.0)
    csv_lines = r.loss_csv().splitlines()
    assert csv_lines[0] == "step,loss" and len(csv_lines) == 31
    recs = [json.loads(x) for x in r.records().splitlines()]
    assert recs[-1]["event"] == "summary" and recs[0] == {"event": "eval", "step": 10, "accuracy": r.evals[0][1]}
    assert evaluate_accuracy(ck, dev) == pytest.approx(r.best_dev_accuracy)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small_data):
    train, dev = small_data
    with pytest.raises(NumericError):
        train_classifier(SMALL, quick_plan(lr=1e300, warmup=0), train, dev)


def test_invalid_examples_rejected(small_data):
    train, dev = small_data
    with pytest.raises(DataError):
        train_classifier(SMALL, quick_plan(), train, [Example(None, dev[0].tree)])
    with pytest.raises(DataError):
        train_classifier(SMALL, quick_plan(), train, [Example("maybe", dev[0].tree)])


# ---------------------------------------------------------------- accuracy


def fixed_model(classes, bias):
    tok, lab, _ = build_vocabs([Example("a", parse_bracketed("(S a b)"))])
    cfg = SMALL.replace(token_vocab=len(tok), label_vocab=len(lab), num_classes=len(classes))
    m = TreeTransformer(cfg, tok, lab)
    m.class_vocab = Vocab(classes, unk_fallback=False)
    m.params["cls.W"].data[:] = 0
    m.params["cls.b"].data[:] = bias
    return m


def test_constant_predictor_scores_base_rate():
    corpus = [Example(lbl, parse_bracketed("(S a b)")) for lbl in "ppppn"]
    assert evaluate_accuracy(fixed_model(["n", "p"], [0.0, 1.0]), corpus) == pytest.approx(0.8)
    # ties go to the first class
    assert evaluate_accuracy(fixed_model(["n", "p"], [0.0, 0.0]), corpus) == pytest.approx(0.2)


def test_label_space_mismatch():
    with pytest.raises(DataError):
        evaluate_accuracy(fixed_model(["n", "p"], [0, 0]), [Example("q", parse_bracketed("(S a)"))])


def test_memorization_gives_full_accuracy():
    data = [Example(lbl, parse_bracketed(s)) for lbl, s in
            [("p", "(S a b)"), ("n", "(S c d)"), ("p", "(S a d)"), ("n", "(S c b)")]]
    ck, r = train_classifier(SMALL, TrainPlan(lr=1e-2, warmup=1, max_updates=60, batch_tokens=8, eval_every=20), data, data)
    assert evaluate_accuracy(ck, data) == 1.0
    model, classes = load_classifier(ck)
    assert classes.itos == ["n", "p"]


# ---------------------------------------------------------------- gradient checks


@pytest.mark.parametrize("mask", [True, False])
def test_grad_check_encoder(mask):
    r = grad_check_model(ModelConfig(d=4, d_ffn=8, heads=2, layers_enc=1, hier_size=4, use_subtree_mask=mask))
    assert r.max_error < 1e-6
    assert "enc.0.attn.u" in r.per_param


def test_grad_check_seq2seq():
    r = grad_check_model(ModelConfig(d=4, d_ffn=8, heads=2, layers_enc=1, hier_size=4), seq2seq=True)
    assert r.max_error < 1e-6
    assert any(k.startswith("dec.0.cross") for k in r.per_param)


def test_grad_check_refuses_big_models():
    with pytest.raises(ConfigError):
        grad_check_model(ModelConfig(d=64, heads=4))


# ---------------------------------------------------------------- attention mass


def tree_model(trees, **kw):
    examples = [Example("a", t) for t in trees]
    tok, lab, _ = build_vocabs(examples)
    return TreeTransformer(SMALL.replace(token_vocab=len(tok), label_vocab=len(lab), num_classes=2, **kw), tok, lab)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_balanced_tree_count_shares(n):
    t = balanced_tree(n)
    s = attention_mass_stats(tree_model([t]), [t])
    assert s.leaf_count_share == pytest.approx(n / (2 * n - 1))
    assert s.node_mass + s.leaf_mass == pytest.approx(1.0)
    assert s.queries == 2 * (n - 1)  # heads x node queries x one layer


def test_mass_needs_tree_mode():
    t = balanced_tree(4)
    with pytest.raises(ConfigError):
        attention_mass_stats(tree_model([t], tree_mode=False), [t])


def test_decoder_mass():
    t = balanced_tree(4)
    examples = [Example("a", t)]
    tok, lab, _ = build_vocabs(examples)
    cfg = SMALL.replace(token_vocab=len(tok), label_vocab=len(lab), layers_dec=1, target_vocab=len(tok), num_classes=0)
    m = TreeTransformer(cfg, tok, lab, tok)
    s = attention_mass_stats(m, [t], targets=[["<s>", "t0", "t1"]])
    assert s.node_mass + s.leaf_mass == pytest.approx(1.0)
    assert s.queries == 2 * 3


# ---------------------------------------------------------------- SST reader


SST = """(3 (2 It) (4 (4 works) (2 .)))
(1 (2 Not) (1 (1 good) (2 !)))
(2 (2 Just) (2 okay))
"""


def test_read_sst(tmp_path):
    p = tmp_path / "dev.txt"
    p.write_text(SST)
    ex = read_sst(p)
    assert [e.label for e in ex] == ["pos", "neg"]
    assert str(ex[0].tree) == "(X It (X works .))"
    assert [e.label for e in read_sst(p, binary=False)] == ["3", "1", "2"]
    phr = read_sst(p, phrase_level=True)
    assert sorted(e.label for e in phr) == ["neg", "neg", "pos", "pos"]


def test_read_sst_bad_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("(3 (2 It)\n")
    with pytest.raises(DataError, match="line 1"):
        read_sst(p)


def test_run_report_empty():
    r = RunReport()
    assert r.loss_csv() == "step,loss\n"
    assert json.loads(r.records())["event"] == "summary"
