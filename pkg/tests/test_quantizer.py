import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from potacc.errors import AllZeroGroup, ShapeMismatch
from potacc.qmm import qmm_mult
from potacc.quantizer import (
    QuantParams, dequantize_weights, expand_per_layer_scale, quantize_weights, round_half_away,
)


def test_apot_example():
    w = np.array([[0.625, 0.1875, -0.0625, 0.0]])
    q, p = quantize_weights(w)
    assert p.weight_scales[0] == pytest.approx(0.625 / 127)
    assert q.tolist() == [[127, 38, -13, 0]]


def test_single_weight_and_zero():
    q, p = quantize_weights(np.array([1.0]))
    assert q.tolist() == [127] and p.weight_scales[0] == pytest.approx(1 / 127)


def test_half_away_from_zero():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]
    # 0.5 * 127 = 63.5 exactly: rounds away from zero
    q, _ = quantize_weights(np.array([[1.0, 0.5, -0.5]]))
    assert q.tolist() == [[127, 64, -64]]


def test_all_zero_group():
    with pytest.raises(AllZeroGroup):
        quantize_weights(np.array([[1.0, 2.0], [0.0, 0.0]]))


def test_per_layer():
    w = np.array([[1.0, -0.5], [0.25, 0.0]])
    q, p = quantize_weights(w, "per_layer")
    assert p.per_layer and q.tolist() == [[127, -64], [32, 0]]


def test_expand_per_layer_scale():
    p = QuantParams(np.array([0.01]), 0.5, 3, 0.2, -1)
    e = expand_per_layer_scale(p, 3)
    assert e.weight_scales.tolist() == [0.01] * 3
    assert np.allclose(e.bias_scales, 0.01 * 0.5)
    assert expand_per_layer_scale(p, 1).weight_scales.tolist() == [0.01]
    with pytest.raises(ShapeMismatch):
        expand_per_layer_scale(QuantParams(np.ones(2)), 3)


def test_expanded_scale_requantizes_identically():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m, n, rows = rng.integers(1, 20, 3)
        q_w = rng.integers(-127, 128, (m, n))
        q_a = rng.integers(-128, 128, (rows, n))
        bias = rng.integers(-5000, 5000, m)
        p = QuantParams(np.array([rng.uniform(1e-3, 1e-2)]), rng.uniform(0.01, 0.1),
                        int(rng.integers(-20, 20)), rng.uniform(0.05, 0.5), int(rng.integers(-20, 20)))
        a = qmm_mult(q_w, q_a, p, bias)
        b = qmm_mult(q_w, q_a, expand_per_layer_scale(p, m), bias)
        assert np.array_equal(a, b)


def test_params_validation():
    with pytest.raises(ValueError):
        QuantParams(np.array([0.0]))
    with pytest.raises(ValueError):
        QuantParams(np.array([1.0]), input_zero_point=200)


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_dequantization_error_bound(w):
    w = w.copy()
    w[:, 0] = np.where(w[:, 0] == 0, 1.0, w[:, 0])
    q, p = quantize_weights(w)
    assert q.min() >= -127 and q.max() <= 127
    err = np.abs(dequantize_weights(q, p) - w)
    assert np.all(err <= p.weight_scales[:, None] / 2 * (1 + 1e-9))


@given(arrays(np.float64, (3, 5), elements=finite), st.sampled_from([0.25, 2.0, 8.0]))
def test_scale_equivariance(w, lam):
    w = w.copy()
    w[:, 0] = np.where(w[:, 0] == 0, 1.0, w[:, 0])
    q1, p1 = quantize_weights(w)
    q2, p2 = quantize_weights(w * lam)   # powers of two keep the ratios exact
    assert np.array_equal(q1, q2)
    assert np.allclose(p2.weight_scales, lam * p1.weight_scales)
