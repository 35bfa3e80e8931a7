import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adathresh.core import ConfidenceMap, DepthMap, Grid2
from adathresh.losses import UncertaintyMap
from adathresh.metrics import (
    DepthMetricReport, SparsificationCurve, confidence_roc_auc, curves_to_json, depth_metrics,
    median_scale, metrics_from_csv, metrics_to_csv, optimal_auc, roc_curve_from_scores,
    sparsification_curves, uncertainty_sparsification,
)


def dm(v, valid=None, domain="depth"):
    return DepthMap(Grid2(np.atleast_2d(np.asarray(v, float))), domain, valid)


def test_identity_metrics():
    gt = dm(np.random.default_rng(0).uniform(1, 80, size=(5, 6)))
    r = depth_metrics(gt, gt)
    assert r.as_tuple() == (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)


def test_double_prediction():
    gt = dm(np.random.default_rng(1).uniform(1, 30, size=(4, 4)))
    r = depth_metrics(dm(2 * gt.values), gt)
    assert r.abs_rel == pytest.approx(1.0, abs=1e-15)
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 0.0, 0.0)


def test_single_pixel_and_strict_delta_boundary():
    r = depth_metrics(dm([[5.0]]), dm([[4.0]]))
    assert (r.abs_rel, r.sq_rel, r.rmse) == (0.25, 0.25, 1.0)
    # ratio exactly 1.25: strict comparison excludes it from delta1
    assert r.delta1 == 0.0 and r.delta2 == 1.0 and r.delta3 == 1.0
    assert r.rmse_log == pytest.approx(math.log(1.25), abs=1e-15)


def test_cap_and_masks():
    gt = dm([[10.0, 90.0, 5.0]], valid=[[True, True, False]])
    pred = dm([[10.0, 10.0, 100.0]])
    r = depth_metrics(pred, gt, cap=80)
    assert r.rmse == 0.0
    with pytest.raises(ValueError):
        depth_metrics(dm([[1.0]]), dm([[1.0]], valid=[[False]]))


def test_prediction_clamped_to_floor():
    r = depth_metrics(dm([[1e-9]]), dm([[1.0]]))
    assert r.rmse_log == pytest.approx(-math.log(1e-3))


def test_report_validation():
    with pytest.raises(ValueError):
        DepthMetricReport(0, 0, 0, 0, 0.9, 0.8, 1.0)
    with pytest.raises(ValueError):
        DepthMetricReport(-1, 0, 0, 0, 0, 0, 0)


def test_median_scale_examples():
    gt = dm(np.random.default_rng(2).uniform(1, 20, size=(3, 5)))
    scaled, ratio = median_scale(gt, gt)
    assert ratio == 1.0
    scaled, ratio = median_scale(dm(gt.values / 2), gt)
    assert ratio == 2.0
    np.testing.assert_allclose(scaled.values, gt.values, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100))
def test_median_scaled_metrics_invariant_to_rescale(seed, s):
    rng = np.random.default_rng(seed)
    gt = dm(rng.uniform(1, 50, size=(4, 5)))
    pred = dm(gt.values * rng.uniform(0.5, 2.0, size=(4, 5)))
    a = depth_metrics(median_scale(pred, gt)[0], gt).as_tuple()
    b = depth_metrics(median_scale(dm(pred.values * s), gt)[0], gt).as_tuple()
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_csv_roundtrip():
    rows = [DepthMetricReport(0.1, 0.2, 3.0, 0.4, 0.5, 0.6, 0.7),
            DepthMetricReport(1 / 3, 0.0, 1e-17, 2.0, 0.0, 1.0, 1.0)]
    text = metrics_to_csv(rows, ["a", "b"])
    assert text.splitlines()[0] == "image,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3"
    assert metrics_from_csv(text) == rows


# --- ROC / AUC --------------------------------------------------------------------


def test_optimal_auc_values():
    assert optimal_auc(0.0) == 0.0
    assert optimal_auc(0.5) == pytest.approx(0.5 + 0.5 * math.log(0.5), abs=1e-15)
    assert optimal_auc(0.5) == pytest.approx(0.153426, abs=1e-6)
    with pytest.raises(ValueError):
        optimal_auc(1.0)


def test_roc_all_correct():
    d = dm(np.full((4, 4), 10.0), domain="disparity")
    conf = ConfidenceMap(Grid2(np.random.default_rng(0).uniform(size=(4, 4))))
    curve, auc = confidence_roc_auc(conf, d, d)
    assert np.all(curve.errors == 0.0) and auc == 0.0


def _oracle_instance(zeta, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    bad = np.zeros(n, bool)
    bad[rng.permutation(n)[: int(round(zeta * n))]] = True
    gt = np.full(n, 20.0)
    disp = np.where(bad, 30.0, 20.0)
    conf = np.where(bad, 0.0, 1.0)
    return (ConfidenceMap(Grid2(conf[None])), dm(disp[None], domain="disparity"),
            dm(gt[None], domain="disparity"))


@pytest.mark.parametrize("zeta", [0.1, 0.25, 0.5])
def test_oracle_auc_close_to_closed_form(zeta):
    bins = 2000
    _, auc = confidence_roc_auc(*_oracle_instance(zeta), bins=bins)
    assert abs(auc - optimal_auc(zeta)) <= 1 / (2 * bins) + 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(size=(1, 300))
    bad = rng.uniform(size=300) < 0.3
    a = roc_curve_from_scores(conf[0], bad, 50).area()
    b = roc_curve_from_scores(conf[0] ** 3 * 0.5 + 0.1, bad, 50).area()
    assert abs(a - b) <= 1 / 50


def test_roc_fraction_grid():
    c = roc_curve_from_scores(np.array([0.9, 0.1, 0.5, 0.7]), np.array([0, 1, 0, 1], bool), 4)
    assert c.fractions.tolist() == [0, 0.25, 0.5, 0.75, 1.0]
    assert c.errors.tolist() == [0.0, 0.0, 0.5, 1 / 3, 0.5]


def test_roc_ties_stable():
    c1 = roc_curve_from_scores(np.ones(4), np.array([1, 0, 0, 0], bool), 4)
    assert c1.errors.tolist() == [0.0, 1.0, 0.5, 1 / 3, 0.25]


# --- sparsification ----------------------------------------------------------------


def _random_instance(rng, shape=(20, 30)):
    gt = rng.uniform(2, 50, size=shape)
    pred = gt * np.exp(rng.normal(0, 0.2, size=shape))
    return dm(pred), dm(gt)


@pytest.mark.parametrize("metric", ["abs_rel", "rmse", "delta_complement"])
def test_sparsification_oracle_uncertainty_gives_zero_ause(metric):
    rng = np.random.default_rng(5)
    pred, gt = _random_instance(rng)
    err = np.abs(pred.values - gt.values)
    key = err / gt.values if metric == "abs_rel" else err
    if metric == "delta_complement":
        key = np.maximum(pred.values / gt.values, gt.values / pred.values)
    est, ora, ause, aurg = uncertainty_sparsification(UncertaintyMap(Grid2(np.log(key))), pred, gt,
                                                      metric, 50)
    assert ause == 0.0
    assert np.array_equal(est.errors, ora.errors)
    assert est.fractions[-1] == pytest.approx(49 / 50)


@pytest.mark.parametrize("metric", ["abs_rel", "rmse", "delta_complement"])
def test_oracle_curve_below_estimate(metric):
    rng = np.random.default_rng(6)
    pred, gt = _random_instance(rng)
    unc = UncertaintyMap(Grid2(rng.normal(size=pred.shape)))
    est, ora, ause, _ = uncertainty_sparsification(unc, pred, gt, metric, 50)
    assert np.all(ora.errors <= est.errors + 1 / 50)
    assert ause >= 0


def test_constant_uncertainty_flat_aurg():
    bins = 50
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pred, gt = _random_instance(rng)
        flat = UncertaintyMap(Grid2(np.zeros(pred.shape)))
        _, _, _, aurg = uncertainty_sparsification(flat, pred, gt, "abs_rel", bins)
        assert abs(aurg) < 2 / bins


def test_sparsification_truncates_small_inputs():
    est, ora = sparsification_curves(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]),
                                     np.array([1.5, 2.0, 2.0]), "rmse", 4)
    # f = 1 would leave no pixels, so the curve stops at 0.75 (one pixel left)
    assert est.fractions.tolist() == [0.0, 0.25, 0.5, 0.75]
    assert est.errors[-1] == 0.5


def test_curve_validation_and_json():
    with pytest.raises(ValueError):
        SparsificationCurve([0.1, 0.5], [0, 0])
    with pytest.raises(ValueError):
        SparsificationCurve([0.0, 0.5, 0.5], [0, 0, 0])
    c = SparsificationCurve([0.0, 1.0], [0.0, 2.0])
    assert c.area() == 1.0
    doc = json.loads(curves_to_json(curve=c, value=np.float64(1.5), arr=np.arange(2)))
    assert doc == {"curve": {"fractions": [0.0, 1.0], "errors": [0.0, 2.0]}, "value": 1.5,
                   "arr": [0, 1]}
