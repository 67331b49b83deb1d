"""Pinhole camera model, lens undistortion and pixel-to-millimetre scaling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .image import pixel_grid, sample


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics, Brown-Conrady distortion and the mm-per-pixel scale.

    ``skew`` is dimensionless: the intrinsic matrix entry K[0, 1] is
    ``skew * fx``. Rotation is identity and translation zero.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    scale_mm_per_px: float
    skew: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not self.fx > 0 or not self.fy > 0:
            raise ValueError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not self.scale_mm_per_px > 0:
            raise ValueError(f"scale_mm_per_px must be positive, got {self.scale_mm_per_px}")

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.k3, self.p1, self.p2))

    @classmethod
    def identity(cls, width: int, height: int, scale_mm_per_px: float = 1.0) -> "CameraModel":
        return cls(fx=float(max(width, height)), fy=float(max(width, height)),
                   cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, scale_mm_per_px=scale_mm_per_px)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown camera fields: {sorted(unknown)}")
        missing = {"fx", "fy", "cx", "cy", "scale_mm_per_px"} - set(d)
        if missing:
            raise ValueError(f"missing camera fields: {sorted(missing)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "CameraModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def with_scale(self, scale_mm_per_px: float) -> "CameraModel":
        return replace(self, scale_mm_per_px=scale_mm_per_px)


def estimate_scale_factor(known_length_mm: float, measured_length_px: float) -> float:
    """Millimetres per pixel from a feature of known physical size."""
    if not known_length_mm > 0 or not measured_length_px > 0:
        raise ValueError("known length and measured length must both be positive")
    return known_length_mm / measured_length_px


def distort_points(x, y, model: CameraModel):
    """Map ideal pixel coordinates to where the lens actually images them."""
    fx, fy, cx, cy = model.fx, model.fy, model.cx, model.cy
    yn = (np.asarray(y, dtype=np.float64) - cy) / fy
    xn = (np.asarray(x, dtype=np.float64) - cx - model.skew * fx * yn) / fx
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (model.k1 + r2 * (model.k2 + r2 * model.k3))
    xd = xn * radial + 2.0 * model.p1 * xn * yn + model.p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + model.p1 * (r2 + 2.0 * yn * yn) + 2.0 * model.p2 * xn * yn
    return fx * (xd + model.skew * yd) + cx, fy * yd + cy


def undistort(img: np.ndarray, model: CameraModel) -> np.ndarray:
    """Remove lens distortion by sampling the input at forward-distorted positions."""
    img = np.asarray(img, dtype=np.float64)
    if not model.has_distortion:
        return img.copy()
    xs, ys = pixel_grid(img.shape)
    sx, sy = distort_points(xs, ys, model)
    return sample(img, sx, sy)


def pixels_to_mm(displacement_px, model: CameraModel):
    return np.multiply(displacement_px, model.scale_mm_per_px)
