import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from actionseg.numkit import (
    DegenerateNormError,
    DimensionMismatchError,
    NonFiniteError,
    TemperatureError,
    cosine_sim,
    finite_diff_grad,
    kl_divergence,
    l2_normalize,
    relative_error,
    tempered_softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([2, 0]), [1, 0])
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    with pytest.raises(DegenerateNormError):
        l2_normalize([0, 0])


def test_l2_normalize_rejects_nan():
    with pytest.raises(NonFiniteError):
        l2_normalize([np.nan, 1.0])


@given(arrays(np.float64, st.integers(1, 16), elements=finite))
def test_l2_normalize_unit_norm(v):
    if np.linalg.norm(v) <= 1e-12:
        return
    u = l2_normalize(v)
    assert abs(np.linalg.norm(u) - 1) < 1e-9
    # direction preserved
    assert np.dot(u, v) > 0


def test_cosine_examples():
    e1, e2 = np.eye(2)
    assert cosine_sim(e1, e1) == pytest.approx(1.0, abs=1e-12)
    assert cosine_sim(e1, e2) == pytest.approx(0.0, abs=1e-12)
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_errors():
    with pytest.raises(DimensionMismatchError):
        cosine_sim([1, 0], [1, 0, 0])
    with pytest.raises(DegenerateNormError):
        cosine_sim([0, 0], [1, 0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_scale_invariant(a, b, alpha, beta):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_sim(a, b)
    assert -1 <= s <= 1
    assert s == pytest.approx(cosine_sim(b, a), abs=1e-9)
    assert s == pytest.approx(cosine_sim(alpha * a, beta * b), abs=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(tempered_softmax([5, 5, 5], 0.1), [1 / 3] * 3, atol=1e-15)
    # direct evaluation of e/(e+1), 1/(e+1)
    e = math.e
    np.testing.assert_allclose(tempered_softmax([1, 0], 1.0), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(tempered_softmax([1, 0], 1.0), [0.73106, 0.26894], atol=1e-5)
    p = tempered_softmax([1, 0], 0.01)
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0, abs=1e-15)
    assert p[1] == pytest.approx(math.exp(-100) / (1 + math.exp(-100)), rel=1e-10)
    assert p[1] == pytest.approx(3.7e-44, rel=0.01)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(TemperatureError):
        tempered_softmax([1, 2], 0.0)
    with pytest.raises(TemperatureError):
        tempered_softmax([1, 2], -1.0)


@settings(max_examples=300)
@given(arrays(np.float64, st.integers(1, 20), elements=finite),
       st.floats(1e-3, 1e3), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, tau, shift):
    p = tempered_softmax(x, tau)
    assert abs(p.sum() - 1) < 1e-9
    assert np.all(p >= 0)
    np.testing.assert_allclose(tempered_softmax(x + shift, tau), p, atol=1e-12)


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    v = kl_divergence([0.5, 0.5], [1, 0])
    assert math.isfinite(v)
    # 0.5*log(0.5/1) + 0.5*log(0.5/1e-12)
    assert v == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-12), rel=1e-12)


def test_kl_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        kl_divergence([1.0], [0.5, 0.5])


simplex = arrays(np.float64, 6, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3)


@settings(max_examples=300)
@given(simplex, simplex)
def test_kl_nonnegative_and_zero_iff_equal(a, b):
    p, q = a / a.sum(), b / b.sum()
    assert kl_divergence(p, q) >= -1e-12
    assert abs(kl_divergence(p, p)) < 1e-12


def test_finite_diff_examples():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-3)
    assert g[0] == pytest.approx(6.0, abs=1e-9)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.0, np.ones(3)), np.zeros(3))


def test_finite_diff_kl_of_softmax_matches_analytic():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        x = rng.normal(size=5)
        f = lambda z: kl_divergence(p, tempered_softmax(z, 1.0))
        analytic = tempered_softmax(x, 1.0) - p
        assert relative_error(finite_diff_grad(f, x), analytic) < 1e-4


def test_finite_diff_reports_nonfinite():
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda x: float("inf"), np.zeros(2))
