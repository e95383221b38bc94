import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treeattn import checkpoint as ckpt_io
from treeattn.errors import ConfigError, DataError, VocabError
from treeattn.model import (
    Batch,
    ModelConfig,
    TreeTransformer,
    Vocab,
    build_encoder,
    classify,
    count_parameters,
    dump_config,
    from_checkpoint,
    parse_config,
    preset,
    seq2seq_forward,
    to_checkpoint,
)
from treeattn.tensor import Tape, cross_entropy, finite_diff_check, softmax
from treeattn.treebank import encode_tree, parse_bracketed, random_tree


def vocabs(trees):
    encs = [encode_tree(t) for t in trees]
    tok = Vocab.build(x for e in encs for x in e.leaves)
    lab = Vocab.build(x for e in encs for c in e.node_chains for x in c)
    return tok, lab


def tiny(**kw):
    base = dict(d=8, d_ffn=16, layers_enc=2, heads=2, hier_size=6, dropout=0.0, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def corpus():
    g = np.random.default_rng(5)
    return [random_tree(g, int(g.integers(1, 9))) for _ in range(6)]


def model_for(corpus, **kw):
    tok, lab = vocabs(corpus)
    return TreeTransformer(tiny(token_vocab=len(tok), label_vocab=len(lab), **kw), tok, lab)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=6, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d=7, heads=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(layers_dec=1, target_vocab=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0).validate()


def test_config_file_round_trip():
    cfg = tiny(use_subtree_mask=False)
    text = dump_config(cfg.to_dict())
    assert text.startswith("format_version = 1\n")
    assert ModelConfig.from_dict(parse_config(text)) == cfg


def test_config_rejects_unknown_keys_and_versions():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dd": "3"})
    with pytest.raises(ConfigError):
        parse_config("format_version = 9\nd = 4\n")
    with pytest.raises(ConfigError):
        parse_config("just words\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"tree_mode": "maybe"})


def test_presets():
    assert preset("tiny-tree").d == 64 and preset("tiny-tree").heads == 4
    with pytest.raises(ConfigError):
        preset("huge")


# ---------------------------------------------------------------- parameter accounting


def test_hand_counted_tiny_config():
    cfg = ModelConfig(d=4, d_ffn=8, layers_enc=1, heads=2, hier_size=3, token_vocab=10, label_vocab=5, num_classes=2)
    pc = count_parameters(cfg)
    # tokens 40, labels 20, tables 2*3*2, attention 4*16+4*4+4, phi 16+32+8+32+4, head 8+2
    assert pc.total == 40 + 20 + 12 + 84 + 92 + 10
    assert pc.baseline_total == 40 + 80 + 92 + 10


def test_base_preset_baseline_and_overhead():
    base = count_parameters(preset("base"))
    assert base.total == 61_747_200
    tree = count_parameters(preset("base-tree"))
    assert tree.baseline_total == 61_747_200
    assert tree.overhead == 2 * 100 * 256 + 12 * 512  # two tables plus one u per tree attention
    assert tree.overhead_pct < 0.15


def test_big_preset_baseline():
    assert count_parameters(preset("big")).total == 209_813_504


@pytest.mark.parametrize("tree", [True, False])
def test_built_model_matches_count(tree, corpus):
    m = model_for(corpus, tree_mode=tree)
    assert m.num_parameters() == count_parameters(m.cfg).total


def test_tree_mode_off_equals_baseline_count():
    cfg = tiny(layers_dec=1, target_vocab=30)
    assert count_parameters(cfg.replace(tree_mode=False)).total == count_parameters(cfg).baseline_total


# ---------------------------------------------------------------- vocab


def test_vocab_unknowns():
    v = Vocab.build(["a", "b", "a"])
    assert v.id("zzz") == v.id("<unk>")
    strict = Vocab(["a"], unk_fallback=False)
    with pytest.raises(VocabError):
        strict.id("b")


# ---------------------------------------------------------------- forward passes


def test_encoder_shapes(corpus):
    t = parse_bracketed("(S (NP a b) (VP c (NP d e)))")
    tok, lab = vocabs([t])
    m = build_encoder(ModelConfig(d=64, heads=4, layers_enc=2, token_vocab=len(tok), label_vocab=len(lab)), tok, lab)
    enc = encode_tree(t)
    L, N = m.encode(Batch.pack([m.prepare(t)]))
    assert L.shape == (5, 64) and N.shape == (enc.m, 64)


def test_baseline_encoder_ignores_nodes(corpus):
    m = model_for(corpus, tree_mode=False)
    L, N = m.encode(Batch.pack([m.prepare(corpus[0])]))
    assert N is None


def test_same_seed_same_parameters(corpus):
    a, b = model_for(corpus), model_for(corpus)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    c = model_for(corpus, seed=1)
    assert not np.array_equal(a.params["enc.0.attn.W_Q"].data, c.params["enc.0.attn.W_Q"].data)


def test_classify_logit_count_and_zero_head(corpus):
    m = model_for(corpus)
    assert classify(m, corpus[0]).shape == (3,)
    m.params["cls.W"].data[:] = 0
    np.testing.assert_allclose(softmax(classify(m, corpus[:2]).reshape(1, 3)).data, [[1 / 3] * 3], atol=1e-15)


def test_classify_multi_sentence_document(corpus):
    m = model_for(corpus)
    assert classify(m, corpus[:3]).shape == (3,)


@pytest.mark.parametrize("tree", [True, False])
def test_packed_batch_equals_single_runs(tree, corpus):
    m = model_for(corpus, tree_mode=tree)
    prepared = [m.prepare(t) for t in corpus]
    packed = m.classify_batch(Batch.pack(prepared)).data
    single = np.vstack([m.classify_batch(Batch.pack([p])).data for p in prepared])
    np.testing.assert_allclose(packed, single, atol=1e-12)


def test_classifier_gradcheck(corpus):
    m = model_for(corpus, d=4, d_ffn=8, layers_enc=1)
    for p in m.parameters():
        p.data = p.data + np.random.default_rng(0).normal(0, 0.1, size=p.shape)
    batch = Batch.pack([m.prepare(corpus[1])])
    assert finite_diff_check(lambda: cross_entropy(m.classify_batch(batch), [2]), m.parameters()) < 1e-5


def test_checkpoint_reload_is_bit_identical(tmp_path, corpus):
    m = model_for(corpus)
    p = tmp_path / "m.ck"
    ckpt_io.save(to_checkpoint(m, step=3), p)
    m2 = from_checkpoint(ckpt_io.load(p))
    assert np.array_equal(classify(m, corpus[0]).data, classify(m2, corpus[0]).data)
    ckpt_io.save(to_checkpoint(m2, step=3), tmp_path / "m2.ck")
    assert p.read_bytes() == (tmp_path / "m2.ck").read_bytes()


def test_load_state_mismatch(corpus):
    m = model_for(corpus)
    with pytest.raises(DataError):
        m.load_state_dict({})


# ---------------------------------------------------------------- tree2seq


def seq_model(corpus, **kw):
    tok, lab = vocabs(corpus)
    cfg = tiny(token_vocab=len(tok), label_vocab=len(lab), layers_dec=2, target_vocab=len(tok), num_classes=0, **kw)
    return TreeTransformer(cfg, tok, lab, tok)


def test_seq2seq_shape(corpus):
    m = seq_model(corpus)
    out = seq2seq_forward(m, corpus[0], ["<s>", "w0", "w1"])
    assert out.shape == (3, len(m.target_vocab))


def test_seq2seq_empty_prefix(corpus):
    with pytest.raises(DataError):
        seq2seq_forward(seq_model(corpus), corpus[0], [])


@pytest.mark.parametrize("tree", [True, False])
def test_seq2seq_causality(tree, corpus):
    m = seq_model(corpus, tree_mode=tree)
    a = seq2seq_forward(m, corpus[0], ["<s>", "w0", "w1", "w2"]).data
    b = seq2seq_forward(m, corpus[0], ["<s>", "w0", "w5", "w3"]).data
    np.testing.assert_array_equal(a[:2], b[:2])
    assert not np.allclose(a[2], b[2])


def test_seq2seq_packed_equals_single(corpus):
    m = seq_model(corpus)
    prefixes = [m.target_vocab.ids(["<s>", "w1"]), m.target_vocab.ids(["<s>"]), m.target_vocab.ids(["<s>", "w0", "w2"])]
    prepared = [m.prepare(t) for t in corpus[:3]]
    packed = m.decode_batch(Batch.pack(prepared), prefixes).data
    single = np.vstack([m.decode_batch(Batch.pack([p]), [ids]).data for p, ids in zip(prepared, prefixes)])
    np.testing.assert_allclose(packed, single, atol=1e-12)


def test_seq2seq_gradcheck():
    t = parse_bracketed("(S (A x) (B y z))")
    tok, lab = vocabs([t])
    cfg = ModelConfig(d=4, d_ffn=8, layers_enc=1, layers_dec=1, heads=2, hier_size=4, token_vocab=len(tok),
                      label_vocab=len(lab), target_vocab=len(tok), num_classes=0, dropout=0.0)
    m = TreeTransformer(cfg, tok, lab, tok)
    g = np.random.default_rng(2)
    for p in m.parameters():
        p.data = p.data + g.normal(0, 0.1, size=p.shape)
    batch = Batch.pack([m.prepare(t)])
    prefix = tok.ids(["<s>", "x"])

    def f():
        return cross_entropy(m.decode_batch(batch, [prefix]), tok.ids(["x", "y"]))

    assert finite_diff_check(f, m.parameters()) < 1e-5


def test_dropout_changes_training_forward_only(corpus):
    m = model_for(corpus, dropout=0.3)
    batch = Batch.pack([m.prepare(corpus[0])])
    e1 = m.eval().classify_batch(batch).data
    e2 = m.classify_batch(batch).data
    assert np.array_equal(e1, e2)
    t1 = m.train().classify_batch(batch).data
    assert not np.allclose(t1, e1)


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_tape_records_only_when_active(seed):
    g = np.random.default_rng(seed)
    trees = [random_tree(g, int(g.integers(1, 6)))]
    m = model_for(trees)
    batch = Batch.pack([m.prepare(trees[0])])
    out = m.classify_batch(batch)
    assert out._tape is None
    with Tape() as tape:
        m.classify_batch(batch)
    assert len(tape) > 0
