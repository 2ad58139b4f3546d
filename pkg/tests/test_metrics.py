import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef

from after.metrics import accuracy, classification_report, confusion, f1_binary, matthews_corr

GOLD8 = np.array([1, 0, 1, 1, 0, 0, 1, 0])


def pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.corrcoef(a, b)[0, 1])


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75


def test_f1_examples():
    assert f1_binary([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_binary([0, 0, 0], [1, 0, 1]) == 0.0
    # tp=2, fp=1, fn=1
    p, g = [1, 1, 1, 0, 0], [1, 1, 0, 1, 0]
    c = confusion(p, g)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)
    assert f1_binary(p, g) == pytest.approx(2 / 3, abs=1e-15)


def test_mcc_examples():
    assert matthews_corr([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert matthews_corr([1, 1, 1, 1], [1, 0, 1, 0]) == 0.0
    p, g = [1, 1, 1, 0], [1, 1, 0, 0]  # tp=2, tn=1, fp=1, fn=0
    assert matthews_corr(p, g) == pytest.approx(2 / math.sqrt(12), abs=1e-15)
    assert abs(matthews_corr(p, g) - 0.5774) < 1e-4
    assert matthews_corr(p, g) == pytest.approx(pearson(p, g), abs=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        accuracy([1, 0], [1])
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        f1_binary([1], [])
    with pytest.raises(ValueError):
        matthews_corr([2, 0], [1, 0])


def test_mcc_all_prediction_vectors_short():
    for n in range(1, 7):
        for golds in itertools.product((0, 1), repeat=n):
            for preds in itertools.product((0, 1), repeat=n):
                m = matthews_corr(preds, golds)
                if np.std(preds) > 0 and np.std(golds) > 0:
                    assert abs(m - pearson(preds, golds)) < 1e-10
                else:
                    assert m == 0.0


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_against_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        p, g = rng.integers(0, 2, n), rng.integers(0, 2, n)
        rep = classification_report(p, g)
        assert rep["accuracy"] == pytest.approx(accuracy_score(g, p), abs=1e-12)
        assert rep["f1"] == pytest.approx(f1_score(g, p, zero_division=0), abs=1e-12)
        assert rep["mcc"] == pytest.approx(matthews_corrcoef(g, p), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40), st.randoms())
def test_permutation_invariance(pairs, rnd):
    p, g = map(list, zip(*pairs))
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    pp, gg = [p[i] for i in perm], [g[i] for i in perm]
    assert accuracy(p, g) == accuracy(pp, gg)
    assert f1_binary(p, g) == f1_binary(pp, gg)
    assert accuracy(p, p) == 1.0
    c = confusion(p, g)
    assert c.total == len(p)
    assert -1.0 <= matthews_corr(p, g) <= 1.0
    assert 0.0 <= f1_binary(p, g) <= 1.0


def test_mcc_exhaustive_length_8():
    for preds in itertools.product((0, 1), repeat=8):
        m = matthews_corr(preds, GOLD8)
        if len(set(preds)) > 1:
            assert abs(m - pearson(preds, GOLD8)) < 1e-10
        else:
            assert m == 0.0
