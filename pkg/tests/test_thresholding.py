import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adathresh.core import ConfidenceMap, DepthMap, Grid2
from adathresh.thresholding import (
    GtConfidenceParams, ThresholdedConfidence, ThresholdParams, gt_confidence, hard_threshold,
    soft_threshold, soft_threshold_grads, threshold_bce_loss, tonioni_regularizer,
)


def conf(*vals):
    return ConfidenceMap(Grid2(np.array([vals], dtype=float)))


def disp(*vals):
    return DepthMap(Grid2(np.array([vals], dtype=float)), "disparity")


def ref_soft(c, tau, eps):
    return 1.0 / (1.0 + math.exp(-eps * (c - tau)))


def ref_soft_tail(upper):
    """c^T, or c^T - 1 on the upper branch, where it is computed without cancellation."""

    def f(c, tau, eps):
        x = eps * (c - tau)
        if upper:
            return -math.exp(-x) / (1.0 + math.exp(-x))
        return math.exp(x) / (1.0 + math.exp(x))

    return f


def five_point(f, x, h=1e-3):
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


@pytest.mark.parametrize("tau,eps", [(0.3, 10.0), (0.7, 1.0), (0.5, 1000.0)])
def test_soft_midpoint(tau, eps):
    out = soft_threshold(conf(tau), ThresholdParams(tau, eps))
    assert abs(out.values[0, 0] - 0.5) <= 1e-12


def test_soft_known_value():
    out = soft_threshold(conf(1.0), ThresholdParams(0.0, 10.0))
    assert out.values[0, 0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-15)
    assert out.values[0, 0] == pytest.approx(0.9999546, abs=1e-7)


def test_soft_carries_tau():
    out = soft_threshold(conf(0.2, 0.4), ThresholdParams(0.3))
    assert out.tau == 0.3 and out.mode == "soft" and out.params.epsilon == 10.0


def test_params_validation():
    with pytest.raises(ValueError):
        ThresholdParams(1.5)
    with pytest.raises(ValueError):
        ThresholdParams(0.3, 0.0)


def test_soft_open_interval_even_when_saturated():
    out = soft_threshold(conf(0.0, 1.0), ThresholdParams(0.5, 1e4))
    assert np.all(out.values > 0) and np.all(out.values < 1)


def test_soft_grads_at_midpoint():
    dc, dt = soft_threshold_grads(conf(0.3), ThresholdParams(0.3, 10.0))
    assert dc.values[0, 0] == pytest.approx(2.5, abs=1e-15)
    assert dt.values[0, 0] == pytest.approx(-2.5, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.01, 0.99), st.floats(0.5, 50.0))
def test_soft_grads_match_central_differences(c, tau, eps):
    dc, dt = soft_threshold_grads(conf(c), ThresholdParams(tau, eps))
    h = 1e-3 / eps
    ref = ref_soft_tail(c > tau)
    num_c = five_point(lambda v: ref(v, tau, eps), c, h)
    num_t = five_point(lambda v: ref(c, v, eps), tau, h)
    assert abs(dc.values[0, 0] - num_c) <= 1e-7 * abs(num_c) + 1e-300
    assert abs(dt.values[0, 0] - num_t) <= 1e-7 * abs(num_t) + 1e-300


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.99),
       st.floats(0.5, 30))
def test_soft_monotone(c1, c2, tau, tau2, eps):
    if c1 == c2:
        return
    lo, hi = sorted((c1, c2))
    out = soft_threshold(conf(lo, hi), ThresholdParams(tau, eps)).values[0]
    if abs(eps * (hi - lo)) > 1e-9 and out[1] < 1 - 1e-15 and out[0] > 1e-300:
        assert out[0] < out[1]
    t_lo, t_hi = sorted((tau, tau2))
    if t_lo < t_hi:
        a = ref_soft(c1, t_lo, eps)
        b = ref_soft(c1, t_hi, eps)
        assert a >= b


def test_soft_converges_to_hard():
    rng = np.random.default_rng(0)
    c = rng.uniform(size=(20, 20))
    tau = 0.4
    c = c[np.abs(c - tau) >= 0.05]
    cm = ConfidenceMap(Grid2(c[None, :]))
    soft = soft_threshold(cm, ThresholdParams(tau, 1000.0)).values
    hard = hard_threshold(cm, tau).values
    assert np.max(np.abs(soft - hard)) < 1e-10


def test_soft_preserves_ranking():
    rng = np.random.default_rng(1)
    c = rng.uniform(size=(1, 200))
    out = soft_threshold(ConfidenceMap(Grid2(c)), ThresholdParams(0.4, 10.0)).values
    assert np.array_equal(np.argsort(c[0], kind="stable"), np.argsort(out[0], kind="stable"))


def test_hard_examples():
    assert hard_threshold(conf(0.2, 0.3, 0.9), 0.3).values.tolist() == [[0, 1, 1]]
    assert hard_threshold(conf(0.0, 0.5), 0.0).values.tolist() == [[1, 1]]
    assert hard_threshold(conf(0.5, 0.999, 1.0), 1.0).values.tolist() == [[0, 0, 1]]
    out = hard_threshold(conf(0.5), 0.3, learned=True)
    assert out.mode == "hard_learned" and out.tau == 0.3


def test_thresholded_mode_invariants():
    with pytest.raises(ValueError):
        ThresholdedConfidence(Grid2([[0.5]]), None, "hard_fixed", 0.3)
    with pytest.raises(ValueError):
        ThresholdedConfidence(Grid2([[1.0]]), ThresholdParams(0.3), "soft")


def test_gt_confidence_rule():
    assert gt_confidence(disp(5, 6), disp(5, 6)).values.tolist() == [[1, 1]]
    assert gt_confidence(disp(13.0), disp(10.0)).values.tolist() == [[1]]
    out = gt_confidence(disp(10, 12.9, 13.1), disp(10, 10, 10), GtConfidenceParams(3.0))
    assert out.values.tolist() == [[1, 1, 0]]


def test_gt_confidence_errors_and_masks():
    with pytest.raises(ValueError, match="dimension mismatch"):
        gt_confidence(disp(1, 2), disp(1))
    with pytest.raises(ValueError, match="disparity"):
        gt_confidence(DepthMap(Grid2([[1.0]])), disp(1))
    a = DepthMap(Grid2([[1.0, 50.0]]), "disparity", [[True, False]])
    out = gt_confidence(a, disp(1, 1))
    assert out.valid.tolist() == [[True, False]]
    with pytest.raises(ValueError):
        GtConfidenceParams(0.0)


def test_bce_known_values():
    half = ThresholdedConfidence(Grid2(np.full((2, 2), 0.5)), ThresholdParams(0.5))
    y = ConfidenceMap(Grid2([[0.0, 1.0], [1.0, 1.0]]))
    loss, _ = threshold_bce_loss(half, y)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    near = ThresholdedConfidence(Grid2([[1e-9, 1 - 1e-9]]), ThresholdParams(0.5))
    loss, _ = threshold_bce_loss(near, ConfidenceMap(Grid2([[0.0, 1.0]])))
    assert loss < 1e-8


def test_bce_errors_and_gradient():
    ct = ThresholdedConfidence(Grid2([[0.3, 0.8, 0.6]]), ThresholdParams(0.5))
    with pytest.raises(ValueError, match="no supervised pixels"):
        threshold_bce_loss(ct, ConfidenceMap(Grid2([[1.0, 0.0, 1.0]]), np.zeros((1, 3), bool)))
    y = ConfidenceMap(Grid2([[1.0, 0.0, 1.0]]), [[True, True, False]])
    loss, grad = threshold_bce_loss(ct, y)
    h = 1e-6
    for j in range(3):
        v = ct.values.copy()
        v[0, j] += h
        lp, _ = threshold_bce_loss(ThresholdedConfidence(Grid2(v), ct.params), y)
        v[0, j] -= 2 * h
        lm, _ = threshold_bce_loss(ThresholdedConfidence(Grid2(v), ct.params), y)
        assert grad.values[0, j] == pytest.approx((lp - lm) / (2 * h), rel=1e-7, abs=1e-12)
    assert grad.values[0, 2] == 0.0


def test_regularizer():
    assert tonioni_regularizer(0.0) == (0.0, 1.0)
    loss, der = tonioni_regularizer(0.5)
    assert loss == pytest.approx(math.log(2), abs=1e-15) and der == 2.0
    with pytest.raises(ValueError):
        tonioni_regularizer(1.0)
    grid = np.linspace(0, 0.999999, 200)
    vals = [tonioni_regularizer(t)[0] for t in grid]
    assert np.all(np.diff(vals) > 0)
    assert vals[-1] > 13
    h = 1e-6
    for t in (0.1, 0.5, 0.9):
        num = (tonioni_regularizer(t + h)[0] - tonioni_regularizer(t - h)[0]) / (2 * h)
        assert tonioni_regularizer(t)[1] == pytest.approx(num, rel=1e-7)
