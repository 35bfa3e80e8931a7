"""Uncertainty-gated depth refinement through a pixel-adaptive convolution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DepthMap, Grid2, Grid3, bilinear_upsample, same_shape
from .losses import UncertaintyMap

LOG_SIGMA_CLAMP = 30.0


@dataclass(frozen=True)
class GuidanceFuseConfig:
    n_levels: int = 4
    out_channels: int = 8

    def __post_init__(self):
        if self.n_levels < 1 or self.out_channels < 1:
            raise ValueError("n_levels and out_channels must be positive")


@dataclass(frozen=True)
class PacSpec:
    """Single PAC layer: spatial kernel ``weights`` modulated by exp(-|g_i - g_j|^2 / 2)."""

    weights: np.ndarray = field(default_factory=lambda: delta_kernel(3))
    bias: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"PAC weights must be an odd square kernel, got {w.shape}")
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("PAC weights and bias must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def window(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class RefineParams:
    k: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")


def delta_kernel(window: int = 3) -> np.ndarray:
    w = np.zeros((window, window))
    w[window // 2, window // 2] = 1.0
    return w


def fuse_guidance(features: list[Grid3], cfg: GuidanceFuseConfig, mix,
                  out_hw: tuple[int, int] | None = None) -> Grid3:
    """Upsample every level to ``out_hw`` (default: the largest), concatenate, apply a 1x1 mix."""
    if len(features) != cfg.n_levels:
        raise ValueError(f"expected {cfg.n_levels} feature levels, got {len(features)}")
    if out_hw is None:
        out_hw = (max(f.height for f in features), max(f.width for f in features))
    ups = [bilinear_upsample(f, *out_hw).values for f in features]
    cat = np.concatenate(ups, axis=-1)
    mix = np.atleast_2d(np.asarray(mix, dtype=np.float64))
    if mix.shape != (cfg.out_channels, cat.shape[-1]):
        raise ValueError(
            f"mix matrix shape {mix.shape} does not map {cat.shape[-1]} channels "
            f"to {cfg.out_channels}"
        )
    return Grid3(cat @ mix.T)


# --- PAC kernels on channel-first arrays ----------------------------------------


def window_offsets(window: int):
    r = window // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[..., i, j] = x[..., i + dy, j + dx]`` with zero fill outside."""
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def pac_kernels(guidance: np.ndarray, window: int) -> np.ndarray:
    """Gaussian guidance affinities, shape (..., window*window, H, W).

    ``guidance`` is channel-first (..., C, H, W). Out-of-image neighbours get 0.
    """
    h, w = guidance.shape[-2:]
    if window > h or window > w:
        raise ValueError(f"PAC window {window} larger than image {h}x{w}")
    ones = np.ones((h, w))
    ks = []
    for dy, dx in window_offsets(window):
        diff = guidance - shift(guidance, dy, dx)
        k = np.exp(-0.5 * np.sum(diff * diff, axis=-3))
        ks.append(k * shift(ones, dy, dx))
    return np.stack(ks, axis=-3)


def pac_apply(d: np.ndarray, kernels: np.ndarray, weights: np.ndarray, bias: float) -> np.ndarray:
    """``bias + sum_o K_o * W_o * shift(d, o)`` for d of shape (..., H, W)."""
    window = weights.shape[0]
    out = np.full(d.shape, float(bias))
    for o, (dy, dx) in enumerate(window_offsets(window)):
        out += kernels[..., o, :, :] * weights[dy + window // 2, dx + window // 2] * shift(d, dy, dx)
    return out


def pac_forward(d: DepthMap, g: Grid3, spec: PacSpec) -> DepthMap:
    """PAC filtering of ``d`` guided by ``g``; invalid inputs contribute zero.

    Output pixels that come out non-positive are marked invalid.
    """
    if (g.height, g.width) != d.shape:
        raise ValueError(f"guidance {g.height}x{g.width} does not match depth {d.shape}")
    kern = pac_kernels(np.moveaxis(g.values, -1, 0), spec.window)
    out = pac_apply(d.masked(), kern, spec.weights, spec.bias)
    return DepthMap(Grid2(out), d.domain, out > 0)


def blend_gate(log_sigma, k: float = 1.0):
    sigma = np.exp(np.clip(log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
    return np.exp(-sigma / k)


def residual_blend(d: DepthMap, d_prime: DepthMap, u: UncertaintyMap,
                   p: RefineParams = RefineParams()) -> DepthMap:
    """``exp(-sigma/k) * d + (1 - exp(-sigma/k)) * d_prime`` per pixel."""
    same_shape(d, d_prime, u)
    gate = blend_gate(u.values, p.k)
    out = gate * d.values + (1.0 - gate) * d_prime.values
    valid = d.valid & d_prime.valid
    return DepthMap(Grid2(np.where(valid, out, 0.0)), d.domain, valid)
