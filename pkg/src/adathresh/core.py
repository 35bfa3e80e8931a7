"""Dense grid types, validity masks, resampling and depth-map file codecs."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from typing import Literal

import numpy as np
from PIL import Image

# Synthetic stereo rig: disparity [px] = FOCAL_BASELINE / depth [m].
FOCAL_BASELINE = 200.0


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} expects a {ndim}-d array, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have positive dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid2:
    """Row-major H x W grid of float64 values. Immutable."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, 2, "Grid2"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Grid3:
    """Row-major H x W x C grid of float64 values. Immutable."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, 3, "Grid3"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _as_mask(valid, shape) -> np.ndarray:
    if valid is None:
        mask = np.ones(shape, dtype=bool)
    else:
        mask = np.array(valid, dtype=bool, copy=True)
        if mask.shape != shape:
            raise ValueError(f"mask shape {mask.shape} does not match grid {shape}")
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class DepthMap:
    """Depth (meters) or disparity (pixels) with a validity mask.

    Invalid pixels carry arbitrary finite values and must never be read.
    """

    grid: Grid2
    domain: Literal["depth", "disparity"] = "depth"
    valid: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.grid, Grid2):
            object.__setattr__(self, "grid", Grid2(self.grid))
        if self.domain not in ("depth", "disparity"):
            raise ValueError(f"unknown domain {self.domain!r}")
        mask = _as_mask(self.valid, self.grid.shape)
        object.__setattr__(self, "valid", mask)
        if np.any(self.grid.values[mask] <= 0):
            raise ValueError("valid pixels of a DepthMap must be strictly positive")

    @classmethod
    def from_array(cls, values, valid=None, domain="depth") -> "DepthMap":
        return cls(Grid2(values), domain, valid)

    @classmethod
    def positive(cls, values, domain="depth") -> "DepthMap":
        """Treat non-positive samples as invalid (the common file convention)."""
        values = np.asarray(values, dtype=np.float64)
        return cls(Grid2(values), domain, values > 0)

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def masked(self) -> np.ndarray:
        """Copy of the values with invalid pixels zeroed."""
        return np.where(self.valid, self.grid.values, 0.0)


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel reliability in [0, 1]; ``valid`` marks labeled pixels."""

    grid: Grid2
    valid: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.grid, Grid2):
            object.__setattr__(self, "grid", Grid2(self.grid))
        v = self.grid.values
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "valid", _as_mask(self.valid, self.grid.shape))

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def same_shape(*maps) -> tuple[int, int]:
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")
    return shapes.pop()


def depth_to_disparity(d: DepthMap, focal_baseline: float = FOCAL_BASELINE) -> DepthMap:
    if d.domain == "disparity":
        return d
    vals = np.where(d.valid, focal_baseline / np.where(d.valid, d.values, 1.0), 0.0)
    return DepthMap(Grid2(vals), "disparity", d.valid)


def disparity_to_depth(d: DepthMap, focal_baseline: float = FOCAL_BASELINE) -> DepthMap:
    if d.domain == "depth":
        return d
    vals = np.where(d.valid, focal_baseline / np.where(d.valid, d.values, 1.0), 0.0)
    return DepthMap(Grid2(vals), "depth", d.valid)


# --- resampling -------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation matrix of shape (n_out, n_in)."""
    if n_out < n_in:
        raise ValueError(f"downsampling {n_in} -> {n_out} is not supported")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling over the last two axes of ``x``."""
    mh = interp_matrix(x.shape[-2], out_h)
    mw = interp_matrix(x.shape[-1], out_w)
    return np.matmul(np.matmul(mh, x), mw.T)


def bilinear_upsample(src: Grid3, out_h: int, out_w: int) -> Grid3:
    if out_h < src.height or out_w < src.width:
        raise ValueError(
            f"bilinear_upsample only enlarges: {src.height}x{src.width} -> {out_h}x{out_w}"
        )
    chw = np.moveaxis(src.values, -1, 0)
    out = upsample_array(chw, out_h, out_w)
    return Grid3(np.moveaxis(out, 0, -1))


# --- PFM ----------------------------------------------------------------------


class CodecError(ValueError):
    pass


_PFM_HEADER = re.compile(rb"\A(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def pfm_read(data: bytes) -> Grid2:
    """Decode a grayscale ("Pf") PFM byte string into a Grid2."""
    if data[:2] == b"PF":
        raise CodecError("unsupported channel count: color PFM ('PF') is not handled")
    m = _PFM_HEADER.match(data)
    if m is None or m.group(1) != b"Pf":
        raise CodecError("malformed PFM header")
    width, height = int(m.group(2)), int(m.group(3))
    if width <= 0 or height <= 0:
        raise CodecError(f"malformed PFM header: dimensions {width}x{height}")
    try:
        scale = float(m.group(4))
    except ValueError:
        raise CodecError(f"malformed PFM header: scale {m.group(4)!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise CodecError("malformed PFM header: scale must be finite and non-zero")
    endian = "<" if scale < 0 else ">"
    start = m.end()
    need = width * height * 4
    payload = data[start:start + need]
    if len(payload) < need:
        raise CodecError(f"truncated PFM payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    if not np.all(np.isfinite(arr)):
        raise CodecError("PFM payload contains non-finite samples")
    # rows are stored bottom-to-top
    return Grid2(np.flipud(arr).astype(np.float64))


def pfm_write(grid: Grid2, little_endian: bool = True) -> bytes:
    vals = grid.values
    with np.errstate(over="ignore"):
        f32 = vals.astype(np.float32)
    if not np.all(np.isfinite(f32)):
        raise CodecError("value out of float32 range")
    header = f"Pf\n{grid.width} {grid.height}\n{-1.0 if little_endian else 1.0}\n"
    payload = np.flipud(f32).astype("<f4" if little_endian else ">f4").tobytes()
    return header.encode("ascii") + payload


# --- 16-bit depth PNG -----------------------------------------------------------

KITTI_SCALE = 256.0


def kitti_depth_decode(data: bytes) -> DepthMap:
    """Decode a 16-bit single-channel PNG where depth = v / 256 and v = 0 is invalid."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise CodecError(f"cannot decode raster: {exc}") from None
    if img.mode not in ("I;16", "I;16B", "I"):
        raise CodecError(f"expected a 16-bit single-channel raster, got mode {img.mode!r}")
    raw = np.array(img)
    if raw.ndim != 2:
        raise CodecError("expected a single-channel raster")
    if img.mode == "I" and (raw.min() < 0 or raw.max() > 65535):
        raise CodecError("raster values exceed the 16-bit range")
    raw = raw.astype(np.float64)
    valid = raw > 0
    return DepthMap(Grid2(raw / KITTI_SCALE), "depth", valid)


def kitti_depth_encode(d: DepthMap) -> bytes:
    q = np.round(d.values * KITTI_SCALE)
    q = np.where(d.valid, q, 0.0)
    if np.any(q[d.valid] < 1) or np.any(q > 65535):
        raise CodecError("depth outside the representable range (1/256, 255.996] m")
    img = Image.fromarray(q.astype("<u2"))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def read_depth_file(path, domain="depth") -> DepthMap:
    """Load a map from .pfm (non-positive = invalid) or 16-bit .png."""
    data = open(path, "rb").read()
    if str(path).lower().endswith(".png"):
        d = kitti_depth_decode(data)
        return DepthMap(d.grid, domain, d.valid)
    return DepthMap.positive(pfm_read(data).values, domain)


def write_depth_file(path, d: DepthMap) -> None:
    if str(path).lower().endswith(".png"):
        data = kitti_depth_encode(d)
    else:
        data = pfm_write(Grid2(d.masked()))
    with open(path, "wb") as f:
        f.write(data)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Independent generator for a named stream under one root seed.

    ``path`` items (ints or strings) are hashed into the seed sequence, so
    ``derive_rng(7, "scene", 3)`` is the same stream on every run.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for item in path:
        if isinstance(item, str):
            words.extend(item.encode("utf-8"))
            words.append(0xFFFF)
        else:
            words.append(int(item) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
