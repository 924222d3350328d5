import csv
import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tellylab import numcore as nc
from tellylab import telly as T
from tellylab.codeprops import ast_vocabulary
from tellylab.corpus import build_vocab, generate_toy_corpus
from tellylab.data import Codec, pad_batch
from tellylab.model import ModelConfig, init_params, param_count
from tellylab.numcore import RngStream
from tellylab.probes import semantic_clusters

CFG = ModelConfig(num_layers=4, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=50, max_positions=128)


@pytest.fixture
def params():
    return init_params(CFG, RngStream(0))


# -- freezing ------------------------------------------------------------------------

@pytest.mark.parametrize("k", [None, 0, 1, 2, 3, 4])
def test_apply_freeze_matches_closed_form(params, k):
    plan = T.apply_freeze(params, k)
    frozen = {p.name for p in params if not p.trainable}
    expect_frozen = {p.name for g in plan.frozen_groups for p in params.group(g)}
    assert frozen == expect_frozen
    counts = param_count(CFG, k)
    encoder_trainable = sum(p.size for p in params if p.trainable and not p.name.startswith("lm_head"))
    assert encoder_trainable == counts["trainable"] == plan.trainable_encoder


def test_apply_freeze_is_idempotent_and_reversible(params):
    T.apply_freeze(params, 2)
    first = [p.trainable for p in params]
    T.apply_freeze(params, 2)
    assert [p.trainable for p in params] == first
    T.apply_freeze(params, None)
    assert all(p.trainable for p in params)


def test_apply_freeze_rejects_bad_k(params):
    with pytest.raises(ValueError):
        T.apply_freeze(params, 5)
    with pytest.raises(ValueError):
        T.apply_freeze(params, -1)


def test_frozen_parameters_get_no_gradient(params):
    T.apply_freeze(params, 1)
    ids, mask = pad_batch([[1, 5, 6, 7, 2], [1, 8, 2]], 0)
    loss = nc.tsum(T.pooled_last(params, ids, mask))
    loss.backward()
    for p in params:
        if p.trainable and p.name.startswith("layer"):
            assert p.value.grad is not None
        if not p.trainable:
            assert p.value.grad is None


# -- metrics -------------------------------------------------------------------------

def test_mrr_worked_example():
    assert T.metric_mrr([1, 2, 4]) == pytest.approx(0.5833, abs=1e-4)


def test_edit_sim_worked_example():
    assert T.metric_edit_sim("abc", "axc") == pytest.approx(0.6667, abs=1e-4)
    assert T.metric_edit_sim("", "") == 1.0
    assert T.metric_edit_sim("abc", "") == 0.0


def test_recall_and_errors():
    assert T.metric_recall_at_k([1, 3, 7, 11], 5) == 0.5
    with pytest.raises(ValueError):
        T.metric_mrr([])
    with pytest.raises(ValueError):
        T.metric_mrr([0, 1])


def test_prf():
    got = T.metric_prf([1, 1, 0, 0], [1, 0, 1, 0])
    assert got == {"p": 0.5, "r": 0.5, "f1": 0.5}
    assert T.metric_prf([0, 0], [1, 0])["f1"] == 0.0


def test_em_normalizes_whitespace():
    assert T.metric_em("x  =  1", "x = 1") == 1
    assert T.metric_em("x = 1", "x = 2") == 0


def _lev_oracle(a, b):
    @__import__("functools").lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


@given(st.text("abcd", max_size=9), st.text("abcd", max_size=9))
def test_levenshtein_matches_recursive_oracle(a, b):
    assert T.levenshtein(a, b) == _lev_oracle(a, b)
    assert T.levenshtein(a, b) == T.levenshtein(b, a)


@given(st.integers(0, 10_000), st.integers(1, 12))
@settings(max_examples=50)
def test_rank_of_truth_matches_sort(seed, n):
    s = np.random.default_rng(seed).integers(0, 4, size=(n, n)).astype(float)
    ranks = T.rank_of_truth(s)
    for i in range(n):
        better = sorted((v for j, v in enumerate(s[i]) if v > s[i, i]), reverse=True)
        assert ranks[i] == len(better) + 1


# -- tasks -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return generate_toy_corpus(0, 120)


@pytest.fixture(scope="module")
def codec(corpus):
    vocab = build_vocab([r.code for r in corpus] + [r.doc for r in corpus], extra=ast_vocabulary())
    return Codec(vocab)


def _model(codec, layers=2, seed=0):
    cfg = ModelConfig(num_layers=layers, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=len(codec.vocab))
    return init_params(cfg, RngStream(seed))


@pytest.mark.parametrize("temperature", [0.05, 1.0])
def test_search_loss_near_log_batch_at_init(corpus, codec, temperature):
    # default width: narrower models spread init cosines more, which a small temperature amplifies
    task = T.SearchTask(corpus, codec, temperature=temperature)
    cfg = ModelConfig(num_layers=2, hidden_dim=64, ffn_dim=128, num_heads=4, vocab_size=len(codec.vocab))
    params = init_params(cfg, RngStream(0))
    batch = 16
    loss = float(task.loss(params, [], np.arange(batch)).data)
    assert abs(loss - math.log(batch)) / math.log(batch) < 0.15


def test_search_score_of_identical_inputs(corpus, codec):
    task = T.SearchTask(corpus, codec)
    codes = task.data["train"][0][:3]
    s = task.scores(_model(codec), codes, codes).data
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-5)


def test_search_evaluation_ranks(corpus, codec):
    task = T.SearchTask(corpus, codec, eval_limit=10)
    m = task.evaluate(_model(codec), [], "test")
    assert set(m) == {"mrr", "r@1", "r@5", "r@10"}
    assert 0 < m["mrr"] <= 1 and m["r@10"] == 1.0


@pytest.fixture(scope="module")
def clone_task(codec):
    clusters = semantic_clusters(10, 3, RngStream(0))
    return T.CloneTask(clusters, codec, RngStream(1))


def test_clone_pairs_balanced(clone_task):
    for name, (_, _, y) in clone_task.data.items():
        assert y.sum() * 2 == len(y)


def test_clone_head_is_symmetric_and_bounded(clone_task, codec):
    params = _model(codec)
    head = clone_task.init_head(params, RngStream(2))
    left, right, _ = clone_task.data["test"]
    p_lr = clone_task.probabilities(params, head, left, right)
    p_rl = clone_task.probabilities(params, head, right, left)
    np.testing.assert_array_equal(p_lr, p_rl)
    assert ((p_lr > 0) & (p_lr < 1)).all()


def test_canonical_order():
    u = np.array([[1.0, 2.0], [3.0, 0.0], [1.0, 1.0]])
    v = np.array([[1.0, 3.0], [2.0, 9.0], [1.0, 1.0]])
    assert T.canonical_order(u, v).tolist() == [False, True, False]


def test_line_spans():
    toks = ["a", "=", "1", "[NEWLINE]", "[INDENT]", "b", "[NEWLINE]", "c"]
    assert T.line_spans(toks) == [(0, 3), (4, 6), (7, 8)]
    assert T.line_text(["[INDENT]", "b", "=", "2"]) == "b = 2"


def test_completion_examples_are_prefixes(corpus, codec):
    exs = T.completion_examples(corpus[:20], codec, np.random.default_rng(0))
    assert exs
    for ex in exs:
        assert ex.context[0] == codec.vocab.cls_id
        assert "[NEWLINE]" not in ex.target and ex.target


def test_complete_line_is_deterministic_and_bounded(corpus, codec):
    params = _model(codec)
    params.untie_lm_head()
    ctx = T.completion_examples(corpus[:1], codec, np.random.default_rng(0))[0].context
    a = T.complete_line(ctx, params, codec.vocab, max_len=5)
    b = T.complete_line(ctx, params, codec.vocab, max_len=5)
    assert a == b and len(a) <= 5


def test_complete_line_stops_at_newline(codec):
    params = _model(codec)
    params.untie_lm_head()
    w = params["lm_head.w"].data
    w[...] = 0
    w[codec.vocab.newline_id] = 1.0
    params["lm_head.bias"].data[...] = 0
    params["lm_head.bias"].data[codec.vocab.newline_id] = 100.0
    assert T.complete_line([codec.vocab.cls_id, 5, 6], params, codec.vocab) == []


def test_complete_line_truncation_warns(codec):
    params = _model(codec)
    with pytest.warns(UserWarning, match="truncated"):
        T.complete_line([codec.vocab.cls_id] + [5] * 200, params, codec.vocab, max_len=1)


def test_completion_memorizes_small_corpus(codec):
    recs = generate_toy_corpus(4, 20)
    task = T.CompletionTask(recs, codec, RngStream(0), spec=_all_splits_spec())
    params = _model(codec, layers=2)
    cfg = T.FinetuneConfig(lr=3e-3, batch_size=10, max_epochs=150, patience=1000, evaluate=False)
    res = T.finetune(task, params, None, cfg, seeds=(0,), keep_models=True)
    model = res.models[0]
    exs = T.completion_examples(recs, codec, np.random.default_rng(9))
    em = np.mean([T.metric_em(T.line_text(T.complete_line(e.context, model, codec.vocab)), T.line_text(e.target))
                  for e in exs])
    assert em >= 0.9


def _all_splits_spec():
    from tellylab.corpus import SplitSpec
    return SplitSpec(ratios=(1.0, 0.0, 0.0))


# -- fine-tuning ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["search", "clone", "completion"])
@pytest.mark.parametrize("k", [None, 0, 1])
def test_finetune_accounting_and_frozen_groups(kind, k, corpus, codec, clone_task):
    if kind == "search":
        task = T.SearchTask(corpus, codec, train_limit=32, eval_limit=16)
    elif kind == "clone":
        task = clone_task
    else:
        task = T.CompletionTask(corpus, codec, RngStream(0), train_limit=32, eval_limit=4, max_new=4)
    params = _model(codec)
    before = params.group_checksums()
    cfg = T.FinetuneConfig(batch_size=16, max_epochs=2, max_steps=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = T.finetune(task, params, k, cfg, seeds=(0,), keep_models=True)
    rep = res.report
    assert params.group_checksums() == before
    tuned = res.models[0]
    plan = T.FreezePlan.make(params.config, k)
    for g in plan.frozen_groups:
        assert tuned.checksum([p.name for p in tuned.group(g)]) == before[g]
    head = T.head_param_count(task, params.config)
    assert rep.params_trainable == param_count(params.config, k)["trainable"] + head
    assert rep.frozen_groups_verified == list(plan.frozen_groups)
    assert set(rep.metrics) == set(T.TASK_METRICS[kind])


def test_sweep_csv_recomputes(corpus, codec):
    task = T.SearchTask(corpus, codec, train_limit=32, eval_limit=16)
    cfg = T.FinetuneConfig(batch_size=16, max_epochs=2, max_steps=2)
    reports, failures = T.sweep(task, _model(codec), [0, 1], cfg, seeds=(0,))
    assert not failures
    rows = list(csv.DictReader(io.StringIO(T.sweep_csv(reports))))
    assert [r["K"] for r in rows] == ["base", "0", "1"]
    assert list(rows[0])[:6] == list(T.SWEEP_COLUMNS)[:6]
    base = float(rows[0]["params_trainable"])
    counts = [int(r["params_trainable"]) for r in rows]
    assert counts == sorted(counts, reverse=True) and len(set(counts)) == 3
    for r in rows[1:]:
        assert float(r["params_reduction_pct"]) == pytest.approx(100 * (1 - int(r["params_trainable"]) / base))
        if float(rows[0]["mrr"]):
            assert float(r["delta_pct_mrr"]) == pytest.approx(
                100 * (float(r["mrr"]) - float(rows[0]["mrr"])) / float(rows[0]["mrr"]))


def test_frozen_drift_is_detected(corpus, codec, monkeypatch):
    task = T.SearchTask(corpus, codec, train_limit=16, eval_limit=8)
    orig = task.loss

    def meddle(params, head, idx):
        params.group(0)[0].data[...] += 1e-3
        return orig(params, head, idx)

    monkeypatch.setattr(task, "loss", meddle)
    with pytest.raises(T.FrozenDriftError):
        T.finetune(task, _model(codec), 0, T.FinetuneConfig(batch_size=8, max_epochs=1), seeds=(0,))
