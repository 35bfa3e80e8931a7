"""Training objectives for the depth network: confidence-guided L1, Laplacian NLL, and their sum.

The ``*_arrays`` functions work on raw float64 arrays plus a boolean mask and
are shared with the autodiff operators; the typed wrappers validate inputs and
return a :class:`LossReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DepthMap, Grid2, same_shape
from .thresholding import ThresholdedConfidence


@dataclass(frozen=True)
class UncertaintyMap:
    """Laplacian scale stored as ``log_sigma``; sigma = exp(log_sigma) > 0."""

    log_sigma: Grid2

    def __post_init__(self):
        if not isinstance(self.log_sigma, Grid2):
            object.__setattr__(self, "log_sigma", Grid2(self.log_sigma))

    @classmethod
    def from_sigma(cls, sigma) -> "UncertaintyMap":
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        return cls(Grid2(np.log(sigma)))

    @property
    def values(self) -> np.ndarray:
        return self.log_sigma.values

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.values)

    @property
    def shape(self):
        return self.log_sigma.shape


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1e-3

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class LossReport:
    value: float
    grad_d: Grid2
    grad_log_sigma: Grid2 | None = None
    grad_cT: Grid2 | None = None


def _fsum(a: np.ndarray) -> float:
    return math.fsum(a.ravel().tolist())


def depth_regression_arrays(d, pgt, ct, mask):
    """Return (L_D, grad_d, grad_ct); invalid pixels get zero gradient."""
    diff = d - pgt
    r = np.abs(diff)
    w = np.where(mask, ct, 0.0)
    n = int(mask.sum())
    z = _fsum(w)
    if n == 0:
        raise ValueError("empty joint validity mask")
    if z <= np.finfo(np.float64).eps * n:
        raise ValueError("degenerate confidence mass")
    loss = _fsum(w * r) / z
    grad_d = w * np.sign(diff) / z
    grad_ct = np.where(mask, (r - loss) / z, 0.0)
    return loss, grad_d, grad_ct


def uncertainty_nll_arrays(d, pgt, s, mask):
    """Return (L_U, grad_d, grad_s) with s = log sigma."""
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty joint validity mask")
    diff = d - pgt
    r = np.abs(diff)
    inv = np.exp(-s)
    terms = np.where(mask, r * inv + s, 0.0)
    loss = _fsum(terms) / n
    grad_d = np.where(mask, inv * np.sign(diff) / n, 0.0)
    grad_s = np.where(mask, (1.0 - r * inv) / n, 0.0)
    return loss, grad_d, grad_s


def _joint_mask(d: DepthMap, pgt: DepthMap) -> np.ndarray:
    same_shape(d, pgt)
    mask = d.valid & pgt.valid
    if not mask.any():
        raise ValueError("empty joint validity mask")
    return mask


def depth_regression_loss(d: DepthMap, pgt: DepthMap, cT: ThresholdedConfidence) -> LossReport:
    """``sum(c^T |d - pgt|) / sum(c^T)`` over jointly valid pixels."""
    same_shape(d, pgt, cT)
    mask = _joint_mask(d, pgt)
    loss, gd, gc = depth_regression_arrays(d.values, pgt.values, cT.values, mask)
    return LossReport(loss, Grid2(gd), None, Grid2(gc))


def uncertainty_nll(d: DepthMap, pgt: DepthMap, u: UncertaintyMap) -> LossReport:
    same_shape(d, pgt, u)
    mask = _joint_mask(d, pgt)
    loss, gd, gs = uncertainty_nll_arrays(d.values, pgt.values, u.values, mask)
    return LossReport(loss, Grid2(gd), Grid2(gs), None)


def combined_loss(d: DepthMap, pgt: DepthMap, cT: ThresholdedConfidence, u: UncertaintyMap,
                  w: LossWeights = LossWeights()) -> LossReport:
    """L = L_D + lambda * L_U with gradients combined the same way."""
    ld = depth_regression_loss(d, pgt, cT)
    lu = uncertainty_nll(d, pgt, u)
    return LossReport(
        ld.value + w.lam * lu.value,
        Grid2(ld.grad_d.values + w.lam * lu.grad_d.values),
        Grid2(w.lam * lu.grad_log_sigma.values),
        ld.grad_cT,
    )
