"""Synthetic piecewise-planar scenes and a structured pseudo-label corruption model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, uniform_filter

from ..core import FOCAL_BASELINE, DepthMap, Grid2, Grid3, derive_rng

MIN_DEPTH = 1.0
MAX_DEPTH = 80.0
MAX_BAND = 4  # occlusion band width (px) at noise_level 1
OUTLIER_RATE = 0.1  # outlier density at noise_level 1


@dataclass(frozen=True)
class SynthScene:
    image: Grid3
    gt: DepthMap
    pseudo: DepthMap
    noise_level: float
    seed: int


def _render(depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shade by log-depth (near = bright) and add a smooth, depth-independent texture."""
    near, far = 2.0, 45.0
    shade = 0.1 + 0.8 * (np.log(far) - np.log(depth)) / (np.log(far) - np.log(near))
    tex = uniform_filter(rng.normal(size=depth.shape), size=3, mode="reflect")
    img = shade + 0.03 * tex / (tex.std() + 1e-12)
    return np.clip(img, 0.0, 1.0)


def synth_depth(seed: int, dims=(32, 64)) -> np.ndarray:
    h, w = dims
    rng = derive_rng(seed, "scene")
    # ground-plane-like background: disparity linear in the row index
    disp_far = FOCAL_BASELINE / rng.uniform(25.0, 40.0)
    disp_near = FOCAL_BASELINE / rng.uniform(8.0, 14.0)
    rows = np.linspace(0.0, 1.0, h)[:, None]
    cols = np.linspace(-1.0, 1.0, w)[None, :]
    tilt = rng.uniform(-0.1, 0.1)
    disp = (disp_far + (disp_near - disp_far) * rows) * (1.0 + tilt * cols)
    depth = FOCAL_BASELINE / disp

    boxes = []
    for _ in range(int(rng.integers(2, 7))):
        bh = int(rng.integers(max(2, h // 5), max(3, h // 2) + 1))
        bw = int(rng.integers(max(2, w // 8), max(3, w // 3) + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        boxes.append((y0, x0, bh, bw, rng.uniform(0.0, 1.0)))
    # far boxes first so nearer ones paint over them
    boxes.sort(key=lambda b: -b[4])
    for y0, x0, bh, bw, u in boxes:
        region = depth[y0:y0 + bh, x0:x0 + bw]
        hi = 0.75 * region.min()
        lo = min(3.0, hi)
        depth[y0:y0 + bh, x0:x0 + bw] = lo + u * (hi - lo)
    return np.clip(depth, MIN_DEPTH, MAX_DEPTH)


def synth_scene(seed: int, dims=(32, 64), noise_level: float = 0.5) -> SynthScene:
    """Deterministic scene: background gradient plus 2-6 boxes, shaded image, corrupted labels."""
    h, w = dims
    if h < 16 or w < 16:
        raise ValueError(f"scene dims must be at least 16x16, got {h}x{w}")
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must lie in [0, 1], got {noise_level}")
    depth = synth_depth(seed, dims)
    img = _render(depth, derive_rng(seed, "texture"))
    gt = DepthMap(Grid2(depth), "depth")
    pseudo = corrupt_labels(gt, noise_level, seed)
    return SynthScene(Grid3(img[:, :, None]), gt, pseudo, float(noise_level), int(seed))


def _discontinuities(disp: np.ndarray, rho: float):
    """Horizontal neighbour pairs whose disparity jumps by more than rho.

    Returns boolean maps of the nearer pixel for jumps on its right (``fg_left``)
    and on its left (``fg_right``).
    """
    jump = disp[:, :-1] - disp[:, 1:]
    fg_left = np.zeros(disp.shape, dtype=bool)
    fg_right = np.zeros(disp.shape, dtype=bool)
    fg_left[:, :-1] = jump > rho  # pixel x is near, x+1 is far
    fg_right[:, 1:] = -jump > rho  # pixel x+1 is near, x is far
    return fg_left, fg_right


def corruption_masks(gt: DepthMap, noise_level: float, seed: int, rho: float = 3.0,
                     focal_baseline: float = FOCAL_BASELINE):
    """Apply the corruption model and return (pseudo DepthMap, masks).

    ``masks`` has boolean maps ``blur``, ``band``, ``outlier`` for the pixels
    each stage rewrote. Stages apply in that order; later ones overwrite.
    Random draws do not depend on ``noise_level``, so each mask only grows
    as the level increases.
    """
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must lie in [0, 1], got {noise_level}")
    rng = derive_rng(seed, "corrupt")
    h, w = gt.shape
    band_scale = rng.uniform(0.5, 1.5)
    u_out = rng.uniform(size=(h, w))
    out_sign = np.where(rng.uniform(size=(h, w)) < 0.5, -1.0, 1.0)
    out_mag = rho + rng.uniform(1.0, 20.0, size=(h, w))

    valid = gt.valid
    disp = np.where(valid, focal_baseline / np.where(valid, gt.values, 1.0), 0.0)
    out = disp.copy()
    fg_left, fg_right = _discontinuities(disp, rho)
    edges = fg_left | fg_right
    edges[:, 1:] |= fg_left[:, :-1]
    edges[:, :-1] |= fg_right[:, 1:]

    # (iii) boundary blur: blend towards a 3x3 local mean near discontinuities
    near_edge = binary_dilation(edges, iterations=1) & valid
    local = uniform_filter(disp, size=3, mode="nearest")
    out = np.where(near_edge, (1.0 - noise_level) * disp + noise_level * local, out)
    blur = near_edge & (noise_level > 0)

    # (i) occlusion bands: the nearer side of a jump takes the far side's value
    width = int(np.floor(noise_level * MAX_BAND * band_scale + 0.5))
    band = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in np.nonzero(fg_left[y])[0]:  # far pixel at x+1
            for t in range(width):
                xx = x - t
                if xx < 0 or disp[y, xx] - disp[y, x + 1] <= rho:
                    break
                out[y, xx] = disp[y, x + 1]
                band[y, xx] = True
        for x in np.nonzero(fg_right[y])[0]:  # far pixel at x-1
            for t in range(width):
                xx = x + t
                if xx >= w or disp[y, xx] - disp[y, x - 1] <= rho:
                    break
                out[y, xx] = disp[y, x - 1]
                band[y, xx] = True

    # (ii) sparse outliers, always more than rho away from the truth
    outlier = (u_out < OUTLIER_RATE * noise_level) & valid
    lo, hi = focal_baseline / MAX_DEPTH, focal_baseline / MIN_DEPTH
    cand = disp + out_sign * out_mag
    flip = (cand < lo) | (cand > hi)
    cand = np.where(flip, disp - out_sign * out_mag, cand)
    cand = np.clip(cand, lo, hi)
    out = np.where(outlier, cand, out)

    changed = (blur | band | outlier) & (out != disp)
    depth = np.where(changed, focal_baseline / np.where(changed, out, 1.0), gt.values)
    depth = np.where(valid, np.clip(depth, MIN_DEPTH, MAX_DEPTH), 0.0)
    pseudo = DepthMap(Grid2(depth), "depth", valid)
    return pseudo, {"blur": blur, "band": band, "outlier": outlier}


def corrupt_labels(gt: DepthMap, noise_level: float, seed: int, rho: float = 3.0) -> DepthMap:
    """Occlusion bands, sparse outliers and boundary blur, all scaled by ``noise_level``."""
    if noise_level == 0.0:
        return gt
    return corruption_masks(gt, noise_level, seed, rho)[0]
