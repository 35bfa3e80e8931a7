"""Depth accuracy metrics, confidence ROC/AUC and uncertainty sparsification."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from .core import ConfidenceMap, DepthMap, Grid2, same_shape
from .losses import UncertaintyMap

MIN_DEPTH = 1e-3
DEFAULT_CAP = 80.0
METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class DepthMetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"metric values must be finite and non-negative: {vals}")
        if not self.delta1 <= self.delta2 <= self.delta3 <= 1.0:
            raise ValueError("delta accuracies must be ordered and at most 1")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass(frozen=True)
class SparsificationCurve:
    """Fraction -> error samples. Starts at 0; sparsification curves may stop short of 1."""

    fractions: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        f = np.array(self.fractions, dtype=np.float64)
        e = np.array(self.errors, dtype=np.float64)
        if f.shape != e.shape or f.ndim != 1 or f.size < 2:
            raise ValueError("fractions and errors must be equal-length 1-d arrays (>= 2 samples)")
        if f[0] != 0.0 or f[-1] > 1.0 or np.any(np.diff(f) <= 0):
            raise ValueError("fractions must start at 0, increase strictly, and stay within [0, 1]")
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise ValueError("errors must be finite and non-negative")
        f.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "errors", e)

    def area(self) -> float:
        return float(np.trapezoid(self.errors, self.fractions))

    def to_dict(self) -> dict:
        return {"fractions": self.fractions.tolist(), "errors": self.errors.tolist()}


# --- depth metrics -------------------------------------------------------------------


def _depth_metrics_arrays(pred: np.ndarray, gt: np.ndarray) -> DepthMetricReport:
    ratio = np.maximum(pred / gt, gt / pred)
    diff = pred - gt
    return DepthMetricReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def depth_metrics(pred: DepthMap, gt: DepthMap, cap: float = DEFAULT_CAP,
                  min_depth: float = MIN_DEPTH) -> DepthMetricReport:
    """Seven standard depth metrics over valid GT pixels with ``gt <= cap``.

    Predictions are clamped to ``[min_depth, cap]``; invalid prediction pixels
    are excluded as well.
    """
    same_shape(pred, gt)
    if not cap > 0:
        raise ValueError("cap must be positive")
    mask = gt.valid & pred.valid & (gt.values <= cap) & (gt.values >= min_depth)
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    p = np.clip(pred.values[mask], min_depth, cap)
    return _depth_metrics_arrays(p, gt.values[mask])


def median_scale(pred: DepthMap, gt: DepthMap) -> tuple[DepthMap, float]:
    """Scale ``pred`` by median(gt)/median(pred) over jointly valid pixels."""
    same_shape(pred, gt)
    mask = pred.valid & gt.valid
    if not mask.any():
        raise ValueError("no jointly valid pixels for median scaling")
    mp = float(np.median(pred.values[mask]))
    if mp <= 0:
        raise ValueError("median of the prediction is zero")
    ratio = float(np.median(gt.values[mask])) / mp
    return DepthMap(Grid2(pred.values * ratio), pred.domain, pred.valid), ratio


def metrics_to_csv(rows: list[DepthMetricReport], ids: list[str] | None = None,
                   header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(METRIC_COLUMNS)
    if ids is not None:
        cols = ["image"] + cols
    if header:
        w.writerow(cols)
    for i, r in enumerate(rows):
        vals = [repr(float(v)) for v in r.as_tuple()]
        w.writerow(([ids[i]] if ids is not None else []) + vals)
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[DepthMetricReport]:
    reader = csv.DictReader(io.StringIO(text))
    return [DepthMetricReport(**{c: float(row[c]) for c in METRIC_COLUMNS}) for row in reader]


# --- confidence ROC / AUC ----------------------------------------------------------------


def _stable_order(key: np.ndarray, descending: bool) -> np.ndarray:
    """Indices sorted by key with ties broken by ascending pixel index."""
    idx = np.arange(key.size)
    return np.lexsort((idx, -key if descending else key))


def optimal_auc(zeta: float) -> float:
    """Lower bound on AUC for a bad-pixel rate ``zeta``: zeta + (1 - zeta) ln(1 - zeta)."""
    if not 0.0 <= zeta < 1.0:
        raise ValueError(f"zeta must lie in [0, 1), got {zeta}")
    return zeta + (1.0 - zeta) * math.log1p(-zeta)


def bad_pixel_mask(disp: DepthMap, gt: DepthMap, rho: float) -> np.ndarray:
    return np.abs(disp.values - gt.values) > rho


def roc_curve_from_scores(conf: np.ndarray, bad: np.ndarray, bins: int) -> SparsificationCurve:
    """Error rate of the top-f most confident pixels, for f on a uniform grid."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    n = conf.size
    if n == 0:
        raise ValueError("no valid pixels for ROC")
    order = _stable_order(conf, descending=True)
    cum_bad = np.concatenate([[0], np.cumsum(bad[order])])
    fractions = np.linspace(0.0, 1.0, bins + 1)
    counts = np.maximum(np.ceil(fractions * n - 1e-9).astype(int), 1)
    errors = cum_bad[counts] / counts
    errors[0] = 0.0
    return SparsificationCurve(fractions, errors)


def confidence_roc_auc(conf: ConfidenceMap, disp: DepthMap, gt: DepthMap, rho: float = 3.0,
                       bins: int = 50) -> tuple[SparsificationCurve, float]:
    """ROC of bad-pixel rate vs. retained fraction (most confident first) and its AUC.

    AUC is on the raw [0, 1] scale.
    """
    same_shape(conf, disp, gt)
    mask = conf.valid & disp.valid & gt.valid
    if not mask.any():
        raise ValueError("no valid pixels for ROC")
    bad = bad_pixel_mask(disp, gt, rho)[mask]
    curve = roc_curve_from_scores(conf.values[mask], bad, bins)
    return curve, curve.area()


# --- uncertainty sparsification ---------------------------------------------------------

SparsifyMetric = Literal["abs_rel", "rmse", "delta_complement"]


def _pixel_terms(pred, gt, metric):
    """Per-pixel additive term and the oracle ranking key for a metric."""
    if metric == "abs_rel":
        t = np.abs(pred - gt) / gt
        return t, t
    if metric == "rmse":
        t = (pred - gt) ** 2
        return t, t
    if metric == "delta_complement":
        ratio = np.maximum(pred / gt, gt / pred)
        return (ratio >= 1.25).astype(np.float64), ratio
    raise ValueError(f"unknown metric {metric!r}")


def _finish(metric, mean_terms):
    return np.sqrt(mean_terms) if metric == "rmse" else mean_terms


def _sparsify(terms, order, metric, bins):
    """Curve of the metric after removing the first ``f`` fraction of ``order``."""
    n = terms.size
    # remaining set = order[k:]; suffix sums give its mean in O(1) per fraction
    suffix = np.concatenate([np.cumsum(terms[order][::-1])[::-1], [0.0]])
    fractions = np.linspace(0.0, 1.0, bins + 1)
    removed = np.floor(fractions * n + 1e-9).astype(int)
    keep = removed < n
    fractions, removed = fractions[keep], removed[keep]
    means = suffix[removed] / (n - removed)
    return SparsificationCurve(fractions, _finish(metric, np.maximum(means, 0.0)))


def sparsification_curves(unc: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                          metric: SparsifyMetric = "rmse", bins: int = 50):
    """Estimated and oracle curves from flat arrays of valid pixels."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if unc.size == 0:
        raise ValueError("no valid pixels for sparsification")
    terms, oracle_key = _pixel_terms(pred, gt, metric)
    est = _sparsify(terms, _stable_order(unc, descending=True), metric, bins)
    ora = _sparsify(terms, _stable_order(oracle_key, descending=True), metric, bins)
    return est, ora


def uncertainty_sparsification(unc: UncertaintyMap, pred: DepthMap, gt: DepthMap,
                               metric: SparsifyMetric = "rmse", bins: int = 50):
    """Return (estimated curve, oracle curve, AUSE, AURG).

    Pixels are removed most-uncertain first. The last fraction (nothing left)
    is dropped, so both curves end at ``(bins - 1) / bins``.
    """
    same_shape(unc, pred, gt)
    mask = pred.valid & gt.valid
    est, ora = sparsification_curves(unc.values[mask], pred.values[mask], gt.values[mask],
                                     metric, bins)
    ause = float(np.trapezoid(est.errors - ora.errors, est.fractions))
    flat = np.full_like(est.errors, est.errors[0])
    aurg = float(np.trapezoid(flat - est.errors, est.fractions))
    return est, ora, ause, aurg


def curves_to_json(**sections) -> str:
    """Serialise curves, reports and scalars into one JSON document."""

    def conv(v):
        if isinstance(v, SparsificationCurve):
            return v.to_dict()
        if isinstance(v, DepthMetricReport):
            return asdict(v)
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        if isinstance(v, np.ndarray):
            return v.tolist()
        return v

    return json.dumps(conv(sections), indent=2, sort_keys=True)
