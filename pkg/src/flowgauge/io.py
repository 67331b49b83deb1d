"""Frame files on disk: numbered 16-bit PNG/PGM rasters."""
from __future__ import annotations

import glob as _glob
from pathlib import Path

import numpy as np
from PIL import Image

from .image import to_grayscale

FRAME_PATTERN = "frame_{:06d}.{}"


def read_image(path) -> np.ndarray:
    """Load a raster as a [0, 1] grayscale float64 array.

    8-bit and 16-bit single-channel files are scaled by their full range;
    colour files go through the luma conversion.
    """
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
            return to_grayscale(np.asarray(im.convert("RGB")))
        arr = np.asarray(im)
        mode = im.mode
    if mode == "1":
        return arr.astype(np.float64)
    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if mode == "F":
        return np.clip(arr.astype(np.float64), 0.0, 1.0)
    raise ValueError(f"{path}: unsupported image mode {mode}")


def write_image(path, img: np.ndarray) -> None:
    """Write a [0, 1] raster as 16-bit grayscale; format follows the suffix."""
    data = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def write_frames(out_dir, frames, fmt: str = "png") -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out / FRAME_PATTERN.format(i, fmt)
        write_image(p, f)
        paths.append(p)
    return paths


def read_frames(pattern) -> list:
    """Frames matching a glob pattern, in sorted filename order."""
    return [read_image(p) for p in sorted(_glob.glob(str(pattern)))]


def read_mask(path) -> np.ndarray:
    """Binary mask image: nonzero pixels are set."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0
