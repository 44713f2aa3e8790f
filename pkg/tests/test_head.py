import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atac.errors import DegenerateHead, DimensionMismatch, NotUnitNorm
from atac.head import ZeroShotHead, class_probabilities, predict, predict_labels


def brute_softmax(f, rows, temp):
    nf = math.sqrt(sum(c * c for c in f))
    z = [sum(a * b for a, b in zip(f, r)) / nf / temp for r in rows]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    return [v / sum(e) for v in e]


def test_dominant_class_at_default_temperature():
    head = ZeroShotHead(np.eye(3))
    p = class_probabilities(np.array([1.0, 0.0, 0.0]), head)
    assert p[0] == pytest.approx(math.exp(100) / (math.exp(100) + 2), abs=1e-12)
    assert predict(np.array([1.0, 0.0, 0.0]), head).label_index == 0


@pytest.mark.parametrize("temp", [0.01, 0.5, 3.0])
def test_symmetric_embedding_splits_evenly(temp):
    head = ZeroShotHead(np.eye(2), temp)
    f = np.array([1.0, 1.0]) / math.sqrt(2)
    np.testing.assert_allclose(class_probabilities(f, head), [0.5, 0.5])


def test_softmax_scalar_example():
    # unit rows chosen so that the cosines with f are 0.8 and 0.2
    t1 = np.array([0.8, 0.6, 0.0])
    t2 = np.array([0.2, 0.0, math.sqrt(1 - 0.04)])
    head = ZeroShotHead(np.stack([t1, t2]), 1.0)
    p = class_probabilities(np.array([1.0, 0.0, 0.0]), head)
    assert p[0] == pytest.approx(0.6457, abs=1e-4)


def test_predict_exact_match_and_tie():
    head = ZeroShotHead(np.eye(3))
    assert predict(np.array([0.0, 1.0, 0.0]), head).label_index == 1
    tie = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    assert predict(tie, head).label_index == 0
    assert predict_labels(tie[None], head)[0] == 0


def test_head_guards():
    with pytest.raises(DegenerateHead):
        ZeroShotHead(np.eye(3)[:1])
    with pytest.raises(NotUnitNorm):
        ZeroShotHead(2 * np.eye(2))
    with pytest.raises(DimensionMismatch):
        class_probabilities(np.ones(4) / 2, ZeroShotHead(np.eye(3)))
    with pytest.raises(NotUnitNorm):
        predict(np.array([2.0, 0.0, 0.0]), ZeroShotHead(np.eye(3)))


@st.composite
def heads(draw):
    dim = draw(st.integers(2, 3))
    k = draw(st.integers(2, 4))
    rows = draw(arrays(float, (k, dim), elements=st.floats(-1, 1)))
    f = draw(arrays(float, dim, elements=st.floats(-1, 1)))
    temp = draw(st.floats(0.01, 5))
    return rows, f, temp


@settings(max_examples=300, deadline=None)
@given(heads())
def test_softmax_matches_scalar_oracle(case):
    rows, f, temp = case
    norms = np.linalg.norm(rows, axis=1)
    if norms.min() < 1e-3 or np.linalg.norm(f) < 1e-3:
        return
    rows = rows / norms[:, None]
    p = class_probabilities(f, ZeroShotHead(rows, temp))
    np.testing.assert_allclose(p, brute_softmax(f.tolist(), rows.tolist(), temp), atol=1e-9, rtol=0)


@settings(max_examples=200, deadline=None)
@given(heads(), st.floats(0.01, 10))
def test_argmax_invariant_to_temperature(case, other):
    rows, f, temp = case
    norms = np.linalg.norm(rows, axis=1)
    if norms.min() < 1e-3 or np.linalg.norm(f) < 1e-3:
        return
    rows = rows / norms[:, None]
    a = predict_labels(f[None], ZeroShotHead(rows, temp))
    b = predict_labels(f[None], ZeroShotHead(rows, other))
    assert a[0] == b[0]
