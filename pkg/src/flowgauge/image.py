"""Grayscale rasters, derivatives, bilinear sampling, warping and pyramids.

Images are plain 2-D ``float64`` numpy arrays indexed ``[y, x]`` with
intensities in [0, 1]. All border handling is clamp-to-edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def as_gray(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as a grayscale raster and return it as float64."""
    img = np.array(data, dtype=np.float64, copy=copy)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D raster, got shape {img.shape}")
    if img.size == 0:
        raise DimensionError("empty raster")
    if not np.all(np.isfinite(img)):
        raise ValueError("raster contains non-finite intensities")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field; ``u`` is horizontal, ``v`` vertical (pixels)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D shapes")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def uniform(cls, shape, du: float, dv: float) -> "FlowField":
        return cls(np.full(shape, float(du)), np.full(shape, float(dv)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v)))


@dataclass(frozen=True)
class ImagePyramid:
    levels: list
    scale_factor: float
    min_dimension: int
    ratios: list = field(default_factory=list)  # (rx, ry) of each level relative to level 0

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def to_grayscale(rgb) -> np.ndarray:
    """Convert an 8-bit RGB raster (``H x W x 3``, or a sequence of three
    ``H x W`` channels) to a [0, 1] luma image."""
    if isinstance(rgb, (list, tuple)):
        if len(rgb) != 3:
            raise DimensionError("expected three channels")
        shapes = {np.shape(c) for c in rgb}
        if len(shapes) != 1:
            raise DimensionError(f"channel dimensions differ: {sorted(shapes)}")
        r, g, b = (np.asarray(c, dtype=np.float64) for c in rgb)
    else:
        arr = np.asarray(rgb)
        if arr.ndim != 3 or arr.shape[2] < 3:
            raise DimensionError(f"expected H x W x 3 raster, got {arr.shape}")
        arr = arr.astype(np.float64)
        r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    wr, wg, wb = LUMA_WEIGHTS
    return np.clip((wr * r + wg * g + wb * b) / 255.0, 0.0, 1.0)


def gradient(img: np.ndarray):
    """Central differences inside, one-sided differences at the border.

    Returns ``(ix, iy)``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise DimensionError(f"gradient needs at least a 3x3 image, got {img.shape}")
    iy, ix = np.gradient(img)
    return ix, iy


def gradient_adjoint(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gradient` applied to the pair ``(px, py)``.

    Satisfies ``sum(gradient(u)[0] * px + gradient(u)[1] * py) ==
    sum(u * gradient_adjoint(px, py))`` for every ``u``.
    """
    return _diff_adjoint(px, axis=1) + _diff_adjoint(py, axis=0)


def _diff_adjoint(p: np.ndarray, axis: int) -> np.ndarray:
    p = np.moveaxis(np.asarray(p, dtype=np.float64), axis, 0)
    n = p.shape[0]
    out = np.zeros_like(p)
    # one-sided rows: d[0] = u1 - u0, d[n-1] = u[n-1] - u[n-2]
    out[0] -= p[0]
    out[1] += p[0]
    out[n - 1] += p[n - 1]
    out[n - 2] -= p[n - 1]
    # interior rows: d[i] = (u[i+1] - u[i-1]) / 2
    half = 0.5 * p[1:n - 1]
    out[2:n] += half
    out[0:n - 2] -= half
    return np.moveaxis(out, 0, axis)


def _sample_setup(shape, x, y):
    h, w = shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, y0, x1, y1, x - x0, y - y0


def sample(img: np.ndarray, x, y) -> np.ndarray:
    """Vectorised bilinear sampling with coordinates clamped to the image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("sample coordinates must be finite")
    x0, y0, x1, y1, fx, fy = _sample_setup(img.shape, x, y)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_with_derivatives(img: np.ndarray, x, y):
    """Bilinear samples plus their exact partial derivatives in x and y.

    Derivatives are zero along an axis where the coordinate was clamped.
    """
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0, y0, x1, y1, fx, fy = _sample_setup(img.shape, x, y)
    a, b = img[y0, x0], img[y0, x1]
    c, d = img[y1, x0], img[y1, x1]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    val = top + (bot - top) * fy
    dx = (b - a) * (1.0 - fy) + (d - c) * fy
    dy = bot - top
    dx = np.where((x < 0) | (x > w - 1), 0.0, dx)
    dy = np.where((y < 0) | (y > h - 1), 0.0, dy)
    return val, dx, dy


def bilinear_sample(img: np.ndarray, x: float, y: float) -> float:
    """Bilinear intensity at a single real-valued position."""
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite sample position ({x}, {y})")
    return float(sample(np.asarray(img, dtype=np.float64), x, y))


def pixel_grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Return ``img(x + u, y + v)`` sampled bilinearly at every pixel."""
    img = np.asarray(img, dtype=np.float64)
    if flow.shape != img.shape:
        raise DimensionError(f"flow {flow.shape} does not match image {img.shape}")
    xs, ys = pixel_grid(img.shape)
    return sample(img, xs + flow.u, ys + flow.v)


def resize(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear resampling to ``shape`` using pixel-centre alignment."""
    h, w = img.shape
    nh, nw = shape
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return sample(img, gx, gy)


def smoothing_sigma(scale_factor: float) -> float:
    return 0.8 * math.sqrt(1.0 / scale_factor ** 2 - 1.0)


def build_pyramid(img: np.ndarray, scale_factor: float = 0.5, min_dimension: int = 16) -> ImagePyramid:
    """Gaussian pyramid, finest level first.

    Each coarser level is smoothed with ``sigma = 0.8 * sqrt(1/s**2 - 1)``
    and resampled to ``round(dim * s)``; construction stops before either
    dimension would fall below ``min_dimension``.
    """
    if not 0.0 < scale_factor < 1.0:
        raise ValueError(f"scale_factor must be in (0, 1), got {scale_factor}")
    if min_dimension < 8:
        raise ValueError(f"min_dimension must be >= 8, got {min_dimension}")
    img = np.asarray(img, dtype=np.float64)
    levels = [img]
    h0, w0 = img.shape
    ratios = [(1.0, 1.0)]
    sigma = smoothing_sigma(scale_factor)
    cur = img
    while True:
        h, w = cur.shape
        nh, nw = int(round(h * scale_factor)), int(round(w * scale_factor))
        if nh < min_dimension or nw < min_dimension:
            break
        cur = resize(gaussian_filter(cur, sigma, mode="nearest"), (nh, nw))
        levels.append(cur)
        ratios.append((nw / w0, nh / h0))
    return ImagePyramid(levels, scale_factor, min_dimension, ratios)


def upsample_flow(flow: FlowField, shape) -> FlowField:
    """Bilinearly resample ``flow`` to ``shape`` and rescale its magnitudes."""
    h, w = flow.shape
    nh, nw = shape
    return FlowField(resize(flow.u, shape) * (nw / w), resize(flow.v, shape) * (nh / h))
