"""Raster types, sRGB transfer functions, and image quality metrics.

All frames carry linear radiometric RGB in float32, row-major with
interleaved channels. Metrics accumulate in float64. Frame objects are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

_SRGB_A = 0.055
_SRGB_GAMMA = 2.4
_SRGB_LINEAR_KNEE = 0.04045
_SRGB_ENCODE_KNEE = 0.0031308


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageFrame:
    """A camera frame in linear radiometric RGB.

    Values are nominally in [0, 1] but are not clamped; they must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"ImageFrame expects (H, W, 3) data, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("ImageFrame data is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageFrame data contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def flatten(self) -> np.ndarray:
        """Row-major, channel-interleaved flattening (the layout contract)."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class LightFrame:
    """A monitor emitter pattern: linear radiance per grid cell, per channel."""

    data: np.ndarray
    max_radiance: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"LightFrame expects (H, W, 3) data, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("LightFrame data is empty")
        if self.max_radiance <= 0:
            raise ValueError("max_radiance must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("LightFrame data contains non-finite values")
        if arr.min() < 0 or arr.max() > self.max_radiance + 1e-6:
            raise ValueError("LightFrame values must lie in [0, max_radiance]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def flatten(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class Mask:
    """Binary per-pixel mask paired with an ImageFrame of the same size."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"Mask expects (H, W) data, got shape {arr.shape}")
        object.__setattr__(self, "data", _freeze(arr.astype(bool)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())


# ---------------------------------------------------------------------------
# sRGB transfer
# ---------------------------------------------------------------------------

def srgb_eotf(v: np.ndarray) -> np.ndarray:
    """Decode sRGB-encoded values in [0,1] to linear, elementwise."""
    v = np.asarray(v, dtype=np.float64)
    lo = v / 12.92
    hi = ((v + _SRGB_A) / (1.0 + _SRGB_A)) ** _SRGB_GAMMA
    return np.where(v <= _SRGB_LINEAR_KNEE, lo, hi)


def srgb_oetf(l: np.ndarray) -> np.ndarray:
    """Encode linear values in [0,1] to sRGB, elementwise."""
    l = np.asarray(l, dtype=np.float64)
    lo = 12.92 * l
    hi = (1.0 + _SRGB_A) * np.power(np.maximum(l, 0.0), 1.0 / _SRGB_GAMMA) - _SRGB_A
    return np.where(l <= _SRGB_ENCODE_KNEE, lo, hi)


def srgb_to_linear(raster: np.ndarray) -> ImageFrame:
    """Linearize an 8-bit sRGB raster into an ImageFrame.

    Raises ValueError for a zero-sized input.
    """
    arr = np.asarray(raster)
    if arr.size == 0:
        raise ValueError("cannot linearize an empty raster")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected an 8-bit raster, got dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    linear = srgb_eotf(arr.astype(np.float64) / 255.0)
    return ImageFrame(linear.astype(np.float32))


def linear_to_srgb(img: ImageFrame) -> np.ndarray:
    """Encode a linear frame to an 8-bit sRGB raster (values clamped to [0,1])."""
    data = np.asarray(img.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot encode non-finite values")
    clamped = np.clip(data, 0.0, 1.0)
    encoded = srgb_oetf(clamped)
    return np.round(encoded * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Metrics (float64 accumulation)
# ---------------------------------------------------------------------------

def _check_same_dims(a: ImageFrame, b: ImageFrame) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"frame dimension mismatch: {a.data.shape} vs {b.data.shape}")


def psnr(a: ImageFrame, b: ImageFrame) -> float:
    """Peak signal-to-noise ratio in dB with peak fixed at 1.0.

    Returns +inf when the frames are identical (zero MSE).
    """
    _check_same_dims(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def rmse(a: ImageFrame, b: ImageFrame) -> float:
    """Root-mean-square error on linear values."""
    _check_same_dims(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def mae(a: ImageFrame, b: ImageFrame) -> float:
    """Mean absolute error as a percentage of full scale, on linear values."""
    _check_same_dims(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(np.abs(diff)) * 100.0)


def mean_luminance(img: ImageFrame) -> float:
    """Mean Rec.709 relative luminance of a linear frame."""
    data = img.data.astype(np.float64)
    luma = data[:, :, 0] * 0.2126 + data[:, :, 1] * 0.7152 + data[:, :, 2] * 0.0722
    return float(luma.mean())


# ---------------------------------------------------------------------------
# PNG / PFM interchange
# ---------------------------------------------------------------------------

def save_png(path, raster: np.ndarray) -> None:
    """Write an 8-bit raster ((H,W,3) RGB or (H,W) grayscale) as PNG."""
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        raise ValueError("save_png expects uint8 data")
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode).save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG as a uint8 array; RGB images come back as (H,W,3)."""
    with Image.open(str(path)) as im:
        if im.mode in ("RGB", "RGBA"):
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_pfm(path, data: np.ndarray) -> None:
    """Write a little-endian color PFM (scale -1.0, bottom-to-top scanlines)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("save_pfm expects (H, W, 3) data")
    h, w, _ = arr.shape
    with open(str(path), "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        flipped = np.ascontiguousarray(arr[::-1], dtype="<f4")
        f.write(flipped.tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a color PFM written by save_pfm (or any compliant writer)."""
    with open(str(path), "rb") as f:
        header = f.readline().strip()
        if header != b"PF":
            raise ValueError(f"not a color PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * 3
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    arr = raw.reshape(h, w, 3)
    return np.ascontiguousarray(arr[::-1]).astype(np.float32)
