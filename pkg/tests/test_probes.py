import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tellylab import numcore as nc
from tellylab import probes as pr
from tellylab.codeprops import CLASSES, ast_only, ast_vocabulary, parse, serialize_ast
from tellylab.codeprops import build_cfg, cyclomatic, unparse
from tellylab.corpus import (
    CorpusRecord,
    SplitSpec,
    build_vocab,
    generate_toy_corpus,
    make_variant,
    semantic_signature,
)
from tellylab.corpus.transforms import sample_inputs
from tellylab.data import Codec
from tellylab.model import ModelConfig, init_params
from tellylab.numcore import RngStream


@pytest.fixture(scope="module")
def records():
    return generate_toy_corpus(1, 120)


ALL_TRAIN = SplitSpec(ratios=(1.0, 0.0, 0.0))


def _rec(code):
    return CorpusRecord.make(code)


# -- datasets ------------------------------------------------------------------------

def test_lexical_labels_for_assignment():
    ds = pr.build_lexical_dataset([_rec("x = 1\n")] + [_rec(f"y{i} = {i}\n") for i in range(9)])
    examples = [e for split in ds.splits.values() for e in split]
    first = [e for e in examples if e.inputs == ("x = 1\n",)][:3]
    assert [CLASSES[e.label] for e in first] == ["Identifier", "Operator", "Number"]
    assert [e.position for e in first] == [0, 1, 2]
    assert ds.num_classes == 5


def test_syntactic_pairs_are_balanced_and_negatives_differ(records):
    ds = pr.build_syntactic_dataset(records, RngStream(0))
    for split in ds.splits.values():
        labels = [e.label for e in split]
        assert labels.count(0) == labels.count(1)
        for pos, neg in zip(split[::2], split[1::2]):
            assert pos.inputs[0] == neg.inputs[0]
            assert pos.inputs[1] == " ".join(serialize_ast(ast_only(parse(pos.inputs[0]))))
            assert neg.inputs[1] != pos.inputs[1]


def test_syntactic_needs_two_records():
    with pytest.raises(ValueError):
        pr.build_syntactic_dataset([_rec("x = 1\n")], RngStream(0))


@pytest.mark.parametrize("code,bucket", [
    ("def f(a):\n    return a\n", 0),
    ("def f(a):\n    if a:\n        return 1\n    return 2\n", 1),
    ("def f(a):\n    while a:\n        a = a - 1\n        if a:\n            a = a - 1\n    return a\n", 2),
])
def test_structural_label(code, bucket):
    assert pr.structural_label(code) == bucket


def test_structural_saturates():
    body = "".join(f"    if a > {i}:\n        a = a - 1\n" for i in range(12))
    assert pr.structural_label(f"def f(a):\n{body}    return a\n") == 9


@pytest.fixture(scope="module")
def clusters():
    return pr.semantic_clusters(10, 8, RngStream(3))


def test_semantic_cluster_counts(clusters):
    assert len(clusters) == 10
    assert sum(len(c.codes) for c in clusters) == 80
    assert all(len(set(c.codes)) == 8 for c in clusters)
    assert len({c.signature for c in clusters}) == 10


def test_semantic_variants_share_behaviour(clusters):
    for c in clusters[:4]:
        trees = [parse(code).children[0] for code in c.codes]
        inputs = sample_inputs(len(trees[0].children[1].children), np.random.default_rng(0))
        assert {semantic_signature(t, inputs) for t in trees} == {c.signature}


def test_semantic_names_carry_no_cluster_identity(clusters):
    names = [{parse(code).children[0].children[0].value for code in c.codes} for c in clusters]
    assert np.mean([len(n) for n in names]) > 4


def test_semantic_dataset_splits_by_problem():
    ds = pr.build_semantic_dataset(10, 4, RngStream(5))
    labels = {k: {e.label for e in v} for k, v in ds.splits.items()}
    assert not labels["train"] & labels["test"]
    assert not labels["valid"] & labels["test"]
    assert sum(ds.sizes().values()) == 40


# -- metrics -------------------------------------------------------------------------

def test_average_precision_worked_example():
    assert pr.average_precision([True, False, True]) == pytest.approx(0.8333, abs=1e-4)
    assert pr.average_precision([False, False]) == 0.0


def _map_oracle(x, labels):
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    aps = []
    for i in range(len(x)):
        cand = sorted((j for j in range(len(x)) if j != i), key=lambda j: (-(x[i] @ x[j]), j))
        hits, precs = 0, []
        for rank, j in enumerate(cand, 1):
            if labels[j] == labels[i]:
                hits += 1
                precs.append(hits / rank)
        if precs:
            aps.append(np.mean(precs))
    return float(np.mean(aps))


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_map_matches_bruteforce(seed, k):
    g = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), 3)
    x = g.normal(size=(len(labels), 4))
    assert pr.eval_map(x, labels) == pytest.approx(_map_oracle(x, labels), abs=1e-12)


def test_map_perfect_and_random():
    labels = np.repeat(np.arange(5), 4)
    perfect = np.eye(5)[labels] + 1e-3
    assert pr.eval_map(perfect, labels) == pytest.approx(1.0)
    g = np.random.default_rng(0)
    rand = np.mean([pr.eval_map(g.normal(size=(20, 8)), labels) for _ in range(30)])
    assert 0.15 < rand < 0.35


def test_map_errors():
    with pytest.raises(ValueError):
        pr.eval_map(np.ones((3, 2)), [0, 0, 0])
    with pytest.raises(nc.DegenerateVectorError):
        pr.eval_map(np.array([[1.0, 0], [0, 0], [0, 1], [1, 1]]), [0, 0, 1, 1])
    with pytest.warns(UserWarning, match="singleton"):
        pr.eval_map(np.eye(3), [0, 0, 1])


def test_accuracy():
    assert pr.eval_accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        pr.eval_accuracy([1], [1, 2])
    with pytest.raises(ValueError):
        pr.eval_accuracy([], [])


# -- heads and training ---------------------------------------------------------------

def test_mixer_starts_uniform_and_stays_on_simplex():
    mixer = pr.LayerMixer(5, dtype=np.float64)
    assert np.allclose(mixer.weights(), 0.2)
    mixer.logits.data[...] = [3.0, -1.0, 0.5, 0.0, 9.0]
    w = mixer.weights()
    assert w.sum() == pytest.approx(1.0) and (w > 0).all()
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    np.testing.assert_allclose(mixer(x).data, np.einsum("nld,l->nd", x, w), atol=1e-12)


def test_supcon_gradient():
    nc.set_precision(64)
    try:
        g = np.random.default_rng(0)
        z = nc.Tensor(g.normal(size=(6, 4)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 2, 3])
        err = nc.check_leaves(lambda: pr.supcon_loss(z, labels, 0.1), [z])
        assert err < 1e-4
    finally:
        nc.set_precision(32)


def test_supcon_ignores_anchors_without_positives():
    z = nc.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert float(pr.supcon_loss(z, np.array([0, 1, 2]), 0.1).data) == 0.0


def _synthetic_features(task, informative_layer, n=240, L1=4, d=6, classes=3, seed=0):
    g = np.random.default_rng(seed)
    out = {}
    for i, name in enumerate(pr.SPLITS):
        y = g.integers(classes, size=n)
        x = g.normal(size=(n, L1, d)).astype(np.float32)
        x[:, informative_layer, :classes] += 3.0 * np.eye(classes, dtype=np.float32)[y]
        out[name] = pr.FeatureSplit(x, y)
    return out


def test_probe_finds_informative_layer():
    feats = _synthetic_features("structural", informative_layer=2)
    res = pr.train_probe_seed(feats, "structural", 3, pr.ProbeConfig(lr=1e-2, max_epochs=15), seed=0)
    assert res.metric > 0.85
    assert int(np.argmax(res.lam)) == 2


def test_probe_is_seed_deterministic():
    feats = _synthetic_features("structural", informative_layer=1, n=60)
    cfg = pr.ProbeConfig(lr=1e-2, max_epochs=3)
    a = pr.train_probe_seed(feats, "structural", 3, cfg, seed=1)
    b = pr.train_probe_seed(feats, "structural", 3, cfg, seed=1)
    assert a.metric == b.metric and a.lam == b.lam


@pytest.fixture(scope="module")
def tiny_model(records):
    vocab = build_vocab([r.code for r in records], extra=ast_vocabulary())
    cfg = ModelConfig(num_layers=2, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=len(vocab))
    return init_params(cfg, RngStream(0)), Codec(vocab)


@pytest.mark.parametrize("task", pr.TASKS)
def test_train_probe_end_to_end(task, records, tiny_model):
    params, codec = tiny_model
    if task == "lexical":
        ds = pr.build_lexical_dataset(records[:40])
    elif task == "syntactic":
        ds = pr.build_syntactic_dataset(records[:40], RngStream(0))
    elif task == "structural":
        ds = pr.build_structural_dataset(records)
    else:
        ds = pr.build_semantic_dataset(10, 3, RngStream(0))
    before = params.checksum()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pr.train_probe(params, ds, codec, "random", pr.ProbeConfig(lr=1e-3, max_epochs=2), seeds=(0, 1))
    assert params.checksum() == before
    assert 0.0 <= rep.metric <= 1.0
    assert len(rep.lam) == 3 and sum(rep.lam) == pytest.approx(1.0)
    doc = json.loads(rep.dumps())
    assert {"task", "source", "metric", "lambda", "seeds", "config_hash"} <= set(doc)
    contrib = pr.layer_contributions(rep)
    assert sorted(contrib["ranking"]) == [0, 1, 2]


def test_feature_shapes(records, tiny_model):
    params, codec = tiny_model
    ds = pr.build_syntactic_dataset(records[:20], RngStream(0))
    feats = pr.extract_features(ds, params, codec)
    assert feats["train"].x.shape[1:] == (2, 3, 16)
    std = pr.standardize(feats)
    assert np.allclose(std["train"].x.mean(axis=0), 0, atol=1e-4)


def test_frozen_contract_detects_mutation(records, tiny_model, monkeypatch):
    params, codec = tiny_model
    params = params.copy()
    ds = pr.build_structural_dataset(records[:30])
    orig = pr.train_probe_seed

    def meddle(*a, **k):
        next(iter(params)).data[...] += 1.0
        return orig(*a, **k)

    monkeypatch.setattr(pr, "train_probe_seed", meddle)
    with pytest.raises(pr.FrozenContractError):
        pr.train_probe(params, ds, codec, "pretrained", pr.ProbeConfig(max_epochs=1), seeds=(0,))


def test_dataset_hash_is_stable(records):
    a = pr.build_structural_dataset(records)
    b = pr.build_structural_dataset(records)
    assert pr.dataset_hash(a) == pr.dataset_hash(b)
    assert pr.dataset_hash(a) != pr.dataset_hash(pr.build_structural_dataset(records[:-1]))


def test_two_snippets_give_two_true_and_two_false_pairs():
    recs = [_rec("def f(a):\n    return a\n"), _rec("def g(a):\n    if a:\n        return 1\n    return 2\n")]
    ds = pr.build_syntactic_dataset(recs, RngStream(0), spec=ALL_TRAIN)
    train = ds.splits["train"]
    assert sorted(e.label for e in train) == [0, 0, 1, 1]


def test_syntactic_collision_filter_is_audited():
    # identical shapes apart from identifier names: no valid negative for either snippet
    recs = [_rec("def f(a):\n    return a\n"), _rec("def g(b):\n    return b\n"),
            _rec("def h(a):\n    while a:\n        a = a - 1\n    return a\n")]
    ds = pr.build_syntactic_dataset(recs, RngStream(0), spec=ALL_TRAIN)
    assert ds.meta["shape_collisions_skipped"] == 2
    for pos, neg in zip(ds.splits["train"][::2], ds.splits["train"][1::2]):
        assert neg.inputs[1] != pos.inputs[1]


def test_rename_only_variants_keep_ast_only():
    g = np.random.default_rng(0)
    for r in generate_toy_corpus(2, 30):
        tree = parse(r.code).children[0]
        res = make_variant(tree, g, kinds=["rename"], steps=1)
        if res is None:
            continue
        renamed = unparse(res[0])
        assert renamed != r.code
        assert serialize_ast(ast_only(parse(renamed))) == serialize_ast(ast_only(parse(r.code)))


def test_structural_labels_agree_with_cyclomatic(records):
    ds = pr.build_structural_dataset(records)
    for split in ds.splits.values():
        for e in split:
            m = cyclomatic(build_cfg(parse(e.inputs[0]).children[0]))
            assert e.label == min(m, 10) - 1


def test_map_ties_within_round_off_fall_back_to_index():
    # item 2 is orthogonal to both 0 and 3; float cosines come out as +-1e-17, not 0
    x = np.array([[-2.0, 2.0, -2.0], [-1.0, 3.0, -3.0], [-2.0, -2.0, 0.0], [3.0, -3.0, 0.0], [1.0, 1.0, 1.0]])
    labels = np.array([0, 1, 0, 1, 0])
    sims = x @ x.T / np.outer(np.linalg.norm(x, axis=1), np.linalg.norm(x, axis=1))
    expect = []
    for i in range(len(x)):
        order = sorted((j for j in range(len(x)) if j != i), key=lambda j: (-round(sims[i, j], 12), j))
        expect.append(pr.average_precision([labels[j] == labels[i] for j in order]))
    assert pr.eval_map(x, labels) == pytest.approx(np.mean(expect), abs=1e-12)
