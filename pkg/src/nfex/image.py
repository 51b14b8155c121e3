"""Grayscale rasters and the low-level image operations every pipeline shares:
Gaussian smoothing, multi-scale pyramids, gradients and patch statistics.

Intensities live on the 8-bit scale [0, 255] but are stored as float64 so that
filtering does not quantize. All operations are pure; images are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# BT.601 luma weights, applied when ingesting RGB inputs.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Smallest pyramid level kept; detector windows need this much support.
MIN_PYRAMID_DIM = 8


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster, row-major, intensities in [0, 255]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image data must be 2-D and non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image data contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1e-6 or hi > 255.0 + 1e-6:
            raise ValueError(f"intensities must lie in [0, 255], got range [{lo}, {hi}]")
        arr = np.clip(arr, 0.0, 255.0)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class ImagePyramid:
    """Fine-to-coarse stack of images; level i is the base downscaled by scale_factor**i."""

    levels: tuple[GrayImage, ...]
    scale_factor: float

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        if self.scale_factor <= 1.0:
            raise ValueError(f"scale_factor must exceed 1.0, got {self.scale_factor}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_scale(self, i: int) -> tuple[float, float]:
        """Actual (x, y) magnification from level i coordinates back to the base level."""
        base = self.levels[0]
        lvl = self.levels[i]
        return base.width / lvl.width, base.height / lvl.height


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with kernel radius ceil(3 * sigma)."""
    if not (sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on a raw array with edge replication at the borders."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(arr, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Gaussian-smooth an image; output has the same dimensions as the input."""
    out = blur_array(img.data, sigma)
    # Kernel sums to 1, so any overshoot is float roundoff; clamp it away.
    return GrayImage(np.clip(out, 0.0, 255.0))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample using the pixel-center mapping src = (dst + 0.5) * ratio - 0.5."""
    in_h, in_w = arr.shape
    if (out_h, out_w) == (in_h, in_w):
        return arr.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1.0 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1.0 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy


def build_pyramid(img: GrayImage, scale_factor: float, n_levels: int) -> ImagePyramid:
    """Build a fine-to-coarse pyramid.

    Level 0 is the input unchanged; level i is the base resampled to
    floor(dims / scale_factor**i). Levels that would fall below
    MIN_PYRAMID_DIM in either dimension are dropped, so the effective
    level count may be smaller than requested.
    """
    if scale_factor <= 1.0:
        raise ValueError(f"scale_factor must exceed 1.0, got {scale_factor}")
    if n_levels < 1:
        raise ValueError(f"n_levels must be at least 1, got {n_levels}")
    if img.width < MIN_PYRAMID_DIM or img.height < MIN_PYRAMID_DIM:
        raise ValueError(
            f"base image must be at least {MIN_PYRAMID_DIM}x{MIN_PYRAMID_DIM}, "
            f"got {img.width}x{img.height}"
        )
    levels = [img]
    for i in range(1, n_levels):
        w = int(img.width / scale_factor**i)
        h = int(img.height / scale_factor**i)
        if w < MIN_PYRAMID_DIM or h < MIN_PYRAMID_DIM:
            break
        levels.append(GrayImage(resize_bilinear(img.data, h, w)))
    return ImagePyramid(levels=tuple(levels), scale_factor=float(scale_factor))


def gradient(img: GrayImage) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (gx, gy): central differences inside, one-sided at the borders."""
    if img.width < 3 or img.height < 3:
        raise ValueError(f"gradient needs at least a 3x3 image, got {img.width}x{img.height}")
    return gradient_arrays(img.data)


def gradient_arrays(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """gradient() on a raw float array; no size check."""
    gx = np.empty_like(a)
    gy = np.empty_like(a)
    gx[:, 1:-1] = (a[:, 2:] - a[:, :-2]) * 0.5
    gx[:, 0] = a[:, 1] - a[:, 0]
    gx[:, -1] = a[:, -1] - a[:, -2]
    gy[1:-1, :] = (a[2:, :] - a[:-2, :]) * 0.5
    gy[0, :] = a[1, :] - a[0, :]
    gy[-1, :] = a[-1, :] - a[-2, :]
    return gx, gy


def patch_stats(img: GrayImage, center: tuple[float, float], radius: int) -> tuple[float, float]:
    """Mean and sum of squared deviations over the square patch clipped to bounds.

    `center` is (x, y); sub-pixel centers are rounded to the nearest pixel.
    """
    cx = int(round(center[0]))
    cy = int(round(center[1]))
    if not (0 <= cx < img.width and 0 <= cy < img.height):
        raise ValueError(f"patch center {center} lies outside a {img.width}x{img.height} image")
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    patch = img.data[
        max(0, cy - radius) : cy + radius + 1,
        max(0, cx - radius) : cx + radius + 1,
    ]
    mean = float(patch.mean())
    return mean, float(((patch - mean) ** 2).sum())


# --- file I/O ---------------------------------------------------------------


def luma_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """Collapse an (h, w, 3) array to single-channel luma."""
    r, g, b = LUMA_WEIGHTS
    return rgb[..., 0] * r + rgb[..., 1] * g + rgb[..., 2] * b


def load_pgm(path) -> GrayImage:
    """Read a binary 8-bit PGM (P5)."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval < 1 or maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: raster truncated ({len(raster)} of {width * height} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(arr.astype(np.float64))


def save_pgm(img: GrayImage, path, comment: str | None = None) -> None:
    """Write a binary 8-bit PGM (P5); intensities round to the nearest integer."""
    arr = np.clip(np.rint(img.data), 0, 255).astype(np.uint8)
    header = b"P5\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode("utf-8") + b"\n"
    header += f"{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def load_image(path) -> GrayImage:
    """Load PGM directly, anything else through Pillow (grayscale or RGB converted)."""
    spath = str(path)
    if spath.lower().endswith(".pgm"):
        return load_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on optional extra
        raise ValueError(
            f"{path}: only PGM is supported without Pillow (install the 'png' extra)"
        ) from exc
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = luma_from_rgb(np.asarray(im.convert("RGB"), dtype=np.float64))
    return GrayImage(arr)
