import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import rel_err
from zlalign.alignment import (
    alignment_loss,
    alignment_loss_grad,
    batch_alignment_loss,
    cosine_distance,
    pool_features,
    pool_rows,
)
from zlalign.errors import DegenerateInputError, InvalidInputError, ShapeError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(d):
    return arrays(np.float64, d, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_pool_examples():
    r = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(pool_features(np.stack([r, r, r])).vector, r)
    assert np.allclose(pool_features(np.array([[1.0, 0.0], [0.0, 1.0]])).vector, [0.5, 0.5])
    for method in ("mean", "last"):
        assert np.array_equal(pool_features(r[None], method).vector, r)
    assert np.array_equal(pool_features(np.array([[1.0, 2.0], [3.0, 4.0]]), "last").vector, [3.0, 4.0])
    with pytest.raises(InvalidInputError):
        pool_features(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        pool_rows(torch.zeros(0, 3))
    with pytest.raises(InvalidInputError):
        pool_features(np.ones((2, 2)), "max")


def test_pooled_feature_invariants():
    f = pool_features(np.array([[3.0, 4.0]]), source="text_g")
    assert f.norm == 5.0 and f.source == "text_g"
    with pytest.raises(InvalidInputError):
        pool_features(np.array([[3.0, 4.0]]), source="audio")


def test_loss_errors():
    with pytest.raises(DegenerateInputError):
        alignment_loss([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DegenerateInputError):
        alignment_loss([1e-9, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        alignment_loss([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        cosine_distance(torch.zeros(2, 3, dtype=torch.float64), torch.ones(2, 3, dtype=torch.float64))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8).flatmap(lambda d: st.tuples(vectors(d), vectors(d))))
def test_loss_range_and_symmetry(pair):
    a, b = pair
    val = alignment_loss(a, b)
    assert 0.0 <= val <= 2.0
    assert abs(val - alignment_loss(b, a)) <= 1e-12


def test_grad_examples():
    v = np.array([0.4, -1.0, 2.0])
    ga, gb = alignment_loss_grad(v, v)
    assert np.allclose(ga, 0, atol=1e-15) and np.allclose(gb, 0, atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        ga, gb = alignment_loss_grad(a, b)
        h = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            na = (alignment_loss(a + e, b) - alignment_loss(a - e, b)) / (2 * h)
            nb = (alignment_loss(a, b + e) - alignment_loss(a, b - e)) / (2 * h)
            assert rel_err(ga[i], na, 1e-8) < 1e-6
            assert rel_err(gb[i], nb, 1e-8) < 1e-6
        assert abs(a @ ga) < 1e-10 and abs(b @ gb) < 1e-10


def test_grad_matches_autograd():
    rng = np.random.default_rng(1)
    a = torch.from_numpy(rng.standard_normal(6)).requires_grad_(True)
    b = torch.from_numpy(rng.standard_normal(6)).requires_grad_(True)
    cosine_distance(a, b).backward()
    ga, gb = alignment_loss_grad(a.detach().numpy(), b.detach().numpy())
    assert np.allclose(a.grad.numpy(), ga, atol=1e-14)
    assert np.allclose(b.grad.numpy(), gb, atol=1e-14)


def test_batch_loss_is_mean_of_pairs():
    rng = np.random.default_rng(2)
    v = torch.from_numpy(rng.standard_normal((5, 4)))
    t = torch.from_numpy(rng.standard_normal((5, 4)))
    expected = np.mean([alignment_loss(v[i].numpy(), t[i].numpy()) for i in range(5)])
    assert abs(float(batch_alignment_loss(v, t)) - expected) < 1e-14
    assert float(cosine_distance(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0]))) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-7)
