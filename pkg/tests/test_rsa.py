import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tellylab.corpus import generate_toy_corpus
from tellylab.model import ModelConfig, init_params
from tellylab.numcore import DegenerateVectorError, RngStream
from tellylab.rsa import (
    ShapeMismatchError,
    UndefinedCorrelationError,
    band,
    check_compatible,
    distance_matrix,
    pearson,
    rsa_compare,
    rsa_from_vectors,
    sample_snippets,
    upper_triangle,
)


def _random_vectors(n=10, d=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def _rotation(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q


def test_distance_matrix_oracle():
    v = _random_vectors()
    m = distance_matrix(v)
    for i in range(10):
        for j in range(10):
            expect = 1.0 if i == j else v[i] @ v[j] / (np.linalg.norm(v[i]) * np.linalg.norm(v[j]))
            assert m[i, j] == pytest.approx(expect, abs=1e-12)
    assert np.array_equal(m, m.T)
    assert np.all(np.abs(m) <= 1.0)


def test_distance_matrix_is_scale_invariant():
    v = _random_vectors()
    scales = np.linspace(0.1, 50, 10)[:, None]
    np.testing.assert_allclose(distance_matrix(v * scales), distance_matrix(v), atol=1e-12)


def test_zero_vector_is_named():
    v = _random_vectors(4)
    v[2] = 0
    with pytest.raises(DegenerateVectorError, match="snip-c"):
        distance_matrix(v, names=["snip-a", "snip-b", "snip-c", "snip-d"])


def test_pearson_four_by_four_oracle():
    a = np.array([[1, .9, .2, .4], [.9, 1, .3, .5], [.2, .3, 1, .8], [.4, .5, .8, 1]])
    b = np.array([[1, .7, .1, .6], [.7, 1, .2, .3], [.1, .2, 1, .9], [.6, .3, .9, 1]])
    x, y = [.9, .2, .4, .3, .5, .8], [.7, .1, .6, .2, .3, .9]
    expect = np.corrcoef(x, y)[0, 1]
    assert pearson(a, b) == pytest.approx(expect, abs=1e-12)


def test_pearson_ignores_diagonal_and_lower_triangle():
    m = distance_matrix(_random_vectors())
    other = m.copy()
    np.fill_diagonal(other, 7.0)
    other[np.tril_indices(10, -1)] = -3.0
    assert pearson(m, other) == 1.0


def test_pearson_bounds_and_sign():
    m = distance_matrix(_random_vectors())
    assert pearson(m, m) == 1.0
    assert pearson(m, -m) == pytest.approx(-1.0, abs=1e-12)
    assert pearson(m, 3 * m + 1) == pytest.approx(1.0, abs=1e-12)


def test_pearson_degenerate_inputs():
    m = distance_matrix(_random_vectors())
    with pytest.raises(UndefinedCorrelationError):
        pearson(m, np.ones_like(m))
    with pytest.raises(ValueError):
        pearson(m, m[:5, :5])
    with pytest.raises(ValueError):
        pearson(np.eye(2), np.eye(2))


@given(arrays(np.float64, (8, 5), elements=st.floats(-5, 5)).filter(
    lambda v: np.all(np.linalg.norm(v, axis=1) > 1e-2)), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_rotation_leaves_rsa_at_one(v, seed):
    m = distance_matrix(v)
    if np.ptp(upper_triangle(m)) < 1e-6:
        return
    rotated = distance_matrix(v @ _rotation(5, seed))
    assert pearson(m, rotated) == pytest.approx(1.0, abs=1e-6)


def test_snippet_permutation_invariance():
    va, vb = _random_vectors(12, 5, 1), _random_vectors(12, 5, 2)
    perm = np.random.default_rng(3).permutation(12)
    r = pearson(distance_matrix(va), distance_matrix(vb))
    rp = pearson(distance_matrix(va[perm]), distance_matrix(vb[perm]))
    assert r == pytest.approx(rp, abs=1e-12)


def test_rsa_from_vectors_per_layer():
    va = np.stack([_random_vectors(9, 4, s) for s in range(3)], axis=1)
    rhos = rsa_from_vectors(va, va)
    assert rhos == [1.0, 1.0, 1.0]
    with pytest.raises(ShapeMismatchError):
        rsa_from_vectors(va, va[:, :2])


def test_bands():
    assert band(0.8) == "fairly similar"
    assert band(0.79) == "intermediate"
    assert band(0.5) == "intermediate"
    assert band(0.49) == "dissimilar"


@pytest.fixture(scope="module")
def records():
    return generate_toy_corpus(0, 50)


def test_sample_is_deterministic_and_hashed(records):
    a, ha = sample_snippets(records, 20, seed=4)
    b, hb = sample_snippets(records, 20, seed=4)
    c, hc = sample_snippets(records, 20, seed=5)
    assert [r.id for r in a] == [r.id for r in b] and ha == hb
    assert ha != hc
    assert len({r.id for r in a}) == 20
    order = [records.index(r) for r in a]
    assert order == sorted(order)
    with pytest.raises(ValueError):
        sample_snippets(records, 51, seed=0)


SMALL = ModelConfig(num_layers=2, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=30, max_positions=24)


def _seqs(n=12, seed=0):
    g = np.random.default_rng(seed)
    return [[1, *g.integers(5, 30, size=g.integers(3, 15)).tolist(), 2] for _ in range(n)]


def test_rsa_compare_self_and_report_formats():
    p = init_params(SMALL, RngStream(0))
    rep = rsa_compare(p, p, _seqs(), pad_id=0, names=("a", "a"), seed=9)
    assert rep.rho == [1.0, 1.0, 1.0]
    doc = json.loads(rep.dumps())
    assert [x["l"] for x in doc["layers"]] == [0, 1, 2]
    assert doc["N"] == 12 and doc["seed"] == 9 and doc["modelA"] == "a"
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == ["layer", "rho", "band"]
    assert [float(r["rho"]) for r in rows] == rep.rho


def test_rsa_compare_two_inits_are_not_identical():
    a, b = init_params(SMALL, RngStream(0)), init_params(SMALL, RngStream(1))
    rep = rsa_compare(a, b, _seqs(20), pad_id=0)
    assert all(-1.0 <= r < 1.0 - 1e-6 for r in rep.rho)


def test_incompatible_models_rejected():
    a = init_params(SMALL, RngStream(0))
    b = init_params(ModelConfig(num_layers=3, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=30,
                                max_positions=24), RngStream(0))
    with pytest.raises(ShapeMismatchError, match="num_layers"):
        check_compatible(a, b)
