"""Confidence thresholding: soft/hard operators, GT confidence labels, and their losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import ConfidenceMap, DepthMap, Grid2, same_shape

DEFAULT_EPSILON = 10.0
BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class ThresholdParams:
    tau: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class ThresholdedConfidence:
    grid: Grid2
    params: ThresholdParams | None
    mode: Literal["soft", "hard_fixed", "hard_learned"] = "soft"
    tau: float | None = None

    def __post_init__(self):
        v = self.grid.values
        if self.mode == "soft":
            if np.any(v <= 0.0) or np.any(v >= 1.0):
                raise ValueError("soft-thresholded confidence must lie strictly in (0, 1)")
        elif self.mode in ("hard_fixed", "hard_learned"):
            if not np.all((v == 0.0) | (v == 1.0)):
                raise ValueError("hard-thresholded confidence must be binary")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau is None and self.params is not None:
            object.__setattr__(self, "tau", self.params.tau)

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class GtConfidenceParams:
    rho: float = 3.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


def sigmoid(x):
    # split by sign so neither branch overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def soft_threshold_array(c, tau, epsilon=DEFAULT_EPSILON):
    """Elementwise ``1 / (1 + exp(-epsilon * (c - tau)))``; ``tau`` broadcasts."""
    return sigmoid(epsilon * (np.asarray(c, dtype=np.float64) - tau))


def soft_threshold(c: ConfidenceMap, p: ThresholdParams) -> ThresholdedConfidence:
    vals = soft_threshold_array(c.values, p.tau, p.epsilon)
    # Past |epsilon*(c - tau)| ~ 37 the sigmoid rounds to 0 or 1 in float64;
    # keep the open-interval invariant by nudging to the nearest interior value.
    vals = np.clip(vals, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return ThresholdedConfidence(Grid2(vals), p, "soft")


def soft_threshold_grads(c: ConfidenceMap, p: ThresholdParams) -> tuple[Grid2, Grid2]:
    """Return (d c^T / d c, d c^T / d tau) per pixel."""
    x = p.epsilon * (c.values - p.tau)
    # sigmoid(x) * sigmoid(-x) avoids the cancellation in ct * (1 - ct) when ct ~ 1
    dc = p.epsilon * sigmoid(x) * sigmoid(-x)
    return Grid2(dc), Grid2(-dc)


def hard_threshold(c: ConfidenceMap, tau: float, learned: bool = False) -> ThresholdedConfidence:
    """Binary mask ``c >= tau`` (ties count as confident)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    vals = (c.values >= tau).astype(np.float64)
    mode = "hard_learned" if learned else "hard_fixed"
    return ThresholdedConfidence(Grid2(vals), None, mode, tau=float(tau))


def gt_confidence(input: DepthMap, gt: DepthMap, p: GtConfidenceParams = GtConfidenceParams()) -> ConfidenceMap:
    """Binary label: 1 where |input - gt| <= rho in disparity, 0 otherwise.

    Pixels invalid in either map are left unlabeled (``valid`` False).
    """
    same_shape(input, gt)
    for name, m in (("input", input), ("gt", gt)):
        if m.domain != "disparity":
            raise ValueError(f"gt_confidence expects disparity maps; {name} is {m.domain}")
    valid = input.valid & gt.valid
    diff = np.abs(input.values - gt.values)
    label = np.where(valid & (diff <= p.rho), 1.0, 0.0)
    return ConfidenceMap(Grid2(label), valid)


def threshold_bce_loss(cT: ThresholdedConfidence, gt: ConfidenceMap) -> tuple[float, Grid2]:
    """Mean binary cross-entropy of c^T against binary labels over labeled pixels."""
    same_shape(cT, gt)
    valid = gt.valid
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no supervised pixels")
    y = gt.values
    if not np.all((y[valid] == 0.0) | (y[valid] == 1.0)):
        raise ValueError("confidence labels must be binary on valid pixels")
    c = np.clip(cT.values, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(y * np.log(c) + (1.0 - y) * np.log1p(-c))
    loss = math.fsum(terms[valid]) / n
    grad = np.where(valid, (c - y) / (c * (1.0 - c)) / n, 0.0)
    return loss, Grid2(grad)


def tonioni_regularizer(tau: float) -> tuple[float, float]:
    """Return ``-log(1 - tau)`` and its derivative ``1 / (1 - tau)``."""
    if tau >= 1.0:
        raise ValueError(f"tonioni_regularizer is singular at tau >= 1 (got {tau})")
    if tau < 0.0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return -math.log1p(-tau), 1.0 / (1.0 - tau)
