import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon

from after.analysis import (
    TermDistribution,
    domain_probe,
    js_divergence,
    jsd_arrays,
    jsd_matrix,
    matrix_csv,
    matrix_json,
    mlm_probe,
    overlap_matrix,
    probe_accuracy,
    term_distributions,
    vocab_overlap,
)
from after.data import Dataset, Example, build_vocab, encode_text
from after.model import EncoderConfig, VocabMismatchError, init_model


def brute_jsd(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += 0.5 * pi * math.log(2 * pi / (pi + qi), 2)
        if qi > 0:
            total += 0.5 * qi * math.log(2 * qi / (pi + qi), 2)
    return total


def dist(n=None):
    n = st.integers(1, 50) if n is None else n
    return n.flatmap(lambda k: st.lists(st.floats(0, 1), min_size=k, max_size=k)).filter(lambda v: sum(v) > 0)


def normalise(v):
    a = np.asarray(v, dtype=float)
    return a / a.sum()


# ----------------------------------------------------------- distributions

def test_term_distribution_hand_count():
    (t,) = term_distributions(["a a b"], top_k=5)
    assert t.vocab == ["a", "b"]
    assert np.allclose(t.probs, [2 / 3, 1 / 3], atol=1e-15)


def test_term_distributions_joint_vocab_and_zeros():
    p, q = term_distributions([["x x y"], ["y z"]], top_k=5)
    assert p.vocab == q.vocab == ["x", "y", "z"]
    assert p.probs[2] == 0 and q.probs[0] == 0
    assert abs(p.probs.sum() - 1) < 1e-9
    a, b = term_distributions([["same words here"], ["same words here"]])
    assert np.array_equal(a.probs, b.probs)


def test_term_distribution_top_k_union():
    corpus_a = ["a a a b b c"]
    corpus_b = ["d d d e e f"]
    p, _ = term_distributions([corpus_a, corpus_b], top_k=2)
    assert p.vocab == ["a", "b", "d", "e"]
    assert np.allclose(p.probs, [3 / 5, 2 / 5, 0, 0])


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        term_distributions([[""]])
    with pytest.raises(ValueError):
        vocab_overlap([], ["a"])


# --------------------------------------------------------------------- jsd

def test_jsd_examples():
    p = TermDistribution(["a", "b"], [1.0, 0.0])
    q = TermDistribution(["a", "b"], [0.5, 0.5])
    assert js_divergence(p, p) == 0.0
    assert js_divergence(p, TermDistribution(["a", "b"], [0.0, 1.0])) == 1.0
    assert abs(js_divergence(p, q) - 0.3113) < 1e-4
    assert abs(js_divergence(p, q) - brute_jsd([1, 0], [0.5, 0.5])) < 1e-15
    with pytest.raises(ValueError):
        js_divergence(p, TermDistribution(["a", "c"], [0.5, 0.5]))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 50).flatmap(lambda n: st.tuples(dist(st.just(n)), dist(st.just(n)))))
def test_jsd_oracle_symmetry_bounds(pq):
    p, q = normalise(pq[0]), normalise(pq[1])
    d = jsd_arrays(p, q)
    assert abs(d - brute_jsd(p, q)) < 1e-10
    assert abs(d - jsd_arrays(q, p)) < 1e-12
    assert -1e-12 <= d <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(dist())
def test_jsd_zero_iff_equal(v):
    p = normalise(v)
    assert jsd_arrays(p, p) < 1e-12
    q = np.roll(p, 1)
    if not np.allclose(p, q, atol=1e-9):
        assert jsd_arrays(p, q) > 0


def test_jsd_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q = rng.dirichlet(np.ones(20)), rng.dirichlet(np.ones(20))
        assert abs(jsd_arrays(p, q) - jensenshannon(p, q, base=2) ** 2) < 1e-10


# ----------------------------------------------------------------- overlap

def test_overlap_examples():
    a = ["the cat sat", "on the mat"]
    assert vocab_overlap(a, a) == 100.0
    assert vocab_overlap(["x y"], ["p q"]) == 0.0
    assert vocab_overlap(["a b c d"], ["a b"]) == 50.0
    assert vocab_overlap(["a b"], ["a b c d"]) == 100.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=30),
       st.lists(st.sampled_from("defghijk"), min_size=1, max_size=30), st.integers(1, 10))
def test_overlap_bounds(wa, wb, k):
    a, b = [" ".join(wa)], [" ".join(wb)]
    assert 0.0 <= vocab_overlap(a, b, k) <= 100.0
    assert vocab_overlap(a, a, k) == 100.0


def test_matrices_and_csv():
    corpora = {"x": ["a a b"], "y": ["b c c"]}
    m = jsd_matrix(corpora)
    assert m["values"][0][0] == 0 and m["values"][0][1] == m["values"][1][0]
    o = overlap_matrix(corpora, {"z": ["a"]})
    assert o["rows"] == ["x", "y"] and o["cols"] == ["z"] and o["values"] == [[50.0], [0.0]]
    lines = matrix_csv(o).splitlines()
    assert lines[0] == ",z" and lines[1] == "x,50.0"


# ------------------------------------------------------------ model probes

def small_model(vocab_size):
    return init_model(EncoderConfig(vocab_size=vocab_size, d_model=16, n_heads=2, d_ff=32, max_len=32))


def test_mlm_probe_uniform_baseline_and_determinism():
    texts = [" ".join(f"w{(i * 7 + j) % 40}" for j in range(12)) for i in range(60)]
    vocab = build_vocab(texts, 100)
    model = small_model(len(vocab))
    a = mlm_probe(model, vocab, texts, np.random.default_rng(0), n_passes=3)
    b = mlm_probe(model, vocab, texts, np.random.default_rng(0), n_passes=3)
    assert a == b
    assert abs(a - math.log(len(vocab))) < 0.1 * math.log(len(vocab))


def test_mlm_probe_vocab_mismatch():
    vocab = build_vocab(["a b c"], 10)
    with pytest.raises(VocabMismatchError):
        mlm_probe(small_model(len(vocab) + 3), vocab, ["a b"], np.random.default_rng(0))
    with pytest.raises(VocabMismatchError):
        mlm_probe(small_model(len(vocab)), vocab, ["q r s"], np.random.default_rng(0))


def test_probe_identical_domains_near_chance():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(1000, 8))
    labels = np.repeat([0, 1], 500)
    acc = probe_accuracy(feats, labels, np.random.default_rng(1))
    assert abs(acc - 0.5) <= 0.05


def test_probe_one_hot_domain_separable():
    labels = np.repeat([0, 1], 500)
    feats = np.eye(2)[labels]
    assert probe_accuracy(feats, labels, np.random.default_rng(0)) == 1.0


def test_domain_probe_same_texts_is_chance():
    texts = [" ".join(f"w{(i * 3 + j) % 50}" for j in range(8)) for i in range(200)]
    vocab = build_vocab(texts, 100)
    model = small_model(len(vocab))
    main = Dataset("m", 0, [Example(t, 0, 0, encode_text(vocab, t, 32)) for t in texts])
    aux = Dataset("a", 1, [Example(t, None, 1, encode_text(vocab, t, 32)) for t in texts])
    acc = domain_probe(model, main, aux, np.random.default_rng(0), n_per_domain=200)
    assert abs(acc - 0.5) <= 0.1
    with pytest.raises(ValueError):
        domain_probe(model, Dataset("m", 0, main.examples[:10]), aux, np.random.default_rng(0))


def test_matrix_json_roundtrip():
    m = jsd_matrix({"x": ["a b"], "y": ["b c"]})
    assert json.loads(matrix_json(m)) == m
