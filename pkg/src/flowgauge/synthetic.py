"""Synthetic beam sequences with exactly known sub-pixel motion.

A rectangular beam carrying a texture translates rigidly over a static
background. Each frame is rendered with 4x4 supersampling; the texture is a
smooth (cubic-spline) field evaluated at the exact displaced positions, so
the interior of the beam is an exact sub-pixel translation of frame 0.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, spline_filter

from . import io as fio

SUPERSAMPLE = 4
OCCLUDER_INTENSITY = 0.95


class SpecError(ValueError):
    """Invalid scene description; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class TextureKind(enum.Enum):
    FLAT = "flat"
    SPECKLE = "speckle"
    LOGO = "logo"


@dataclass(frozen=True)
class Texture:
    kind: TextureKind = TextureKind.SPECKLE
    grain: float = 3.0
    contrast: float = 0.8
    pattern: str = "rings"
    level: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "kind", TextureKind(self.kind))


@dataclass(frozen=True)
class MotionComponent:
    """``amplitude * exp(-decay * t) * sin(2 pi frequency t + phase)``."""

    amplitude: float
    frequency: float
    phase: float = 0.0
    decay: float = 0.0

    def __call__(self, t):
        return self.amplitude * np.exp(-self.decay * t) * np.sin(2.0 * np.pi * self.frequency * t + self.phase)


@dataclass(frozen=True)
class Illumination:
    """Per-frame linear ramp: frame ``i`` becomes ``(1 + gain*i) * img + bias*i``."""

    gain_per_frame: float = 0.0
    bias_per_frame: float = 0.0


@dataclass(frozen=True)
class Occlusion:
    start_s: float
    end_s: float
    intensity: float = OCCLUDER_INTENSITY


@dataclass(frozen=True)
class SceneSpec:
    frame_size: tuple = (256, 256)  # (width, height)
    beam_rect: tuple = (104, 32, 48, 192)  # (x, y, w, h)
    texture: Texture = field(default_factory=Texture)
    motion_x: tuple = ()
    motion_y: tuple = ()
    frame_rate: float = 60.0
    duration: float = 5.0
    noise_sigma: float = 0.0
    illumination: Illumination = field(default_factory=Illumination)
    occlusion: Occlusion | None = None
    background: str = "speckle"

    def __post_init__(self):
        object.__setattr__(self, "motion_x", tuple(self.motion_x))
        object.__setattr__(self, "motion_y", tuple(self.motion_y))
        self.validate()

    def validate(self) -> None:
        fw, fh = self.frame_size
        if fw < 8 or fh < 8:
            raise SpecError("frame_size", f"must be at least 8x8, got {fw}x{fh}")
        if not self.frame_rate > 0:
            raise SpecError("frame_rate", f"must be positive, got {self.frame_rate}")
        if not self.duration > 0:
            raise SpecError("duration", f"must be positive, got {self.duration}")
        bx, by, bw, bh = self.beam_rect
        if bw <= 0 or bh <= 0 or bx < 0 or by < 0 or bx + bw > fw or by + bh > fh:
            raise SpecError("beam_rect", f"{self.beam_rect} does not lie inside the {fw}x{fh} frame")
        for axis in ("motion_x", "motion_y"):
            for k, comp in enumerate(getattr(self, axis)):
                if not comp.frequency < self.frame_rate / 2:
                    raise SpecError(f"{axis}[{k}].frequency",
                                    f"{comp.frequency} Hz is not below the Nyquist rate {self.frame_rate / 2} Hz")
                if comp.frequency < 0:
                    raise SpecError(f"{axis}[{k}].frequency", "must be >= 0")
                if comp.decay < 0:
                    raise SpecError(f"{axis}[{k}].decay", "must be >= 0")
        if not self.noise_sigma >= 0:
            raise SpecError("noise_sigma", f"must be >= 0, got {self.noise_sigma}")
        t = self.texture
        if t.kind is TextureKind.SPECKLE and not t.grain > 0:
            raise SpecError("texture.grain", "must be positive")
        if not 0 <= t.contrast <= 1:
            raise SpecError("texture.contrast", "must lie in [0, 1]")
        if t.kind is TextureKind.LOGO and t.pattern not in LOGO_PATTERNS:
            raise SpecError("texture.pattern", f"unknown logo {t.pattern!r}; choose from {sorted(LOGO_PATTERNS)}")
        if self.background not in ("speckle", "flat"):
            raise SpecError("background", f"must be 'speckle' or 'flat', got {self.background!r}")
        if self.occlusion is not None:
            o = self.occlusion
            if not 0 <= o.start_s < o.end_s:
                raise SpecError("occlusion", f"need 0 <= start_s < end_s, got [{o.start_s}, {o.end_s})")
            if not 0 <= o.intensity <= 1:
                raise SpecError("occlusion.intensity", "must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def raw_motion(self, t):
        t = np.asarray(t, dtype=np.float64)
        dx = sum((c(t) for c in self.motion_x), np.zeros_like(t))
        dy = sum((c(t) for c in self.motion_y), np.zeros_like(t))
        return dx, dy

    def displacement(self, t):
        """Motion relative to ``t = 0`` so that the first frame is the rest pose."""
        dx, dy = self.raw_motion(t)
        dx0, dy0 = self.raw_motion(0.0)
        return dx - dx0, dy - dy0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        try:
            if "texture" in d:
                d["texture"] = Texture(**d["texture"])
            for axis in ("motion_x", "motion_y"):
                if axis in d:
                    d[axis] = tuple(MotionComponent(**c) for c in d[axis])
            if "illumination" in d:
                d["illumination"] = Illumination(**d["illumination"])
            if d.get("occlusion") is not None:
                d["occlusion"] = Occlusion(**d["occlusion"])
            for key in ("frame_size", "beam_rect"):
                if key in d:
                    d[key] = tuple(d[key])
        except TypeError as exc:
            raise SpecError("spec", str(exc)) from None
        except ValueError as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError("texture.kind", str(exc)) from None
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["texture"]["kind"] = self.texture.kind.value
        d["frame_size"] = list(self.frame_size)
        d["beam_rect"] = list(self.beam_rect)
        d["motion_x"] = [asdict(c) for c in self.motion_x]
        d["motion_y"] = [asdict(c) for c in self.motion_y]
        return d

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class GroundTruth:
    times: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    occluded: np.ndarray

    def __len__(self):
        return self.dx.size

    def write_csv(self, path) -> None:
        lines = ["frame,time_s,dx_px,dy_px,occluded"]
        for i, (t, x, y, o) in enumerate(zip(self.times, self.dx, self.dy, self.occluded)):
            lines.append(f"{i},{t:.6f},{x:.6f},{y:.6f},{int(o)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "GroundTruth":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1], data[:, 2], data[:, 3], data[:, 4].astype(bool))


def _rings(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(xs - (w - 1) / 2, ys - (h - 1) / 2)
    return (np.sin(r / 1.5) > 0).astype(np.float64)


def _checker(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return (((xs // 6) + (ys // 6)) % 2).astype(np.float64)


LOGO_PATTERNS = {"rings": _rings, "checker": _checker}


def _stretch(field_, contrast, centre=0.5):
    lo, hi = field_.min(), field_.max()
    unit = (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)
    return centre + contrast * (unit - 0.5)


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def texture_lattice(tex: Texture, shape, seed: int) -> np.ndarray:
    """Texture samples on the integer lattice of the beam (plus margin)."""
    h, w = shape
    if tex.kind is TextureKind.FLAT:
        return np.full(shape, tex.level)
    if tex.kind is TextureKind.SPECKLE:
        noise = _rng(seed, 0).standard_normal(shape)
        return _stretch(gaussian_filter(noise, tex.grain / 2.0, mode="wrap"), tex.contrast)
    emblem = gaussian_filter(LOGO_PATTERNS[tex.pattern](h, w), 0.7, mode="nearest")
    return _stretch(emblem, tex.contrast)


def background_image(spec: SceneSpec, seed: int) -> np.ndarray:
    fw, fh = spec.frame_size
    if spec.background == "flat":
        return np.full((fh, fw), 0.2)
    noise = _rng(seed, 1).standard_normal((fh, fw))
    return _stretch(gaussian_filter(noise, 1.5, mode="wrap"), 0.25, centre=0.25)


class _Renderer:
    MARGIN = 8

    def __init__(self, spec: SceneSpec, seed: int):
        self.spec = spec
        bx, by, bw, bh = spec.beam_rect
        m = self.MARGIN
        self.lattice = texture_lattice(spec.texture, (bh + 2 * m, bw + 2 * m), seed)
        self.coeffs = spline_filter(self.lattice, order=3, mode="mirror")
        self.background = background_image(spec, seed)
        dx, dy = spec.displacement(spec.times)
        fw, fh = spec.frame_size
        # pixel box that the beam can ever touch
        self.x0 = max(0, int(math.floor(bx - 1 + min(dx.min(), 0.0))))
        self.x1 = min(fw, int(math.ceil(bx + bw + 1 + max(dx.max(), 0.0))))
        self.y0 = max(0, int(math.floor(by - 1 + min(dy.min(), 0.0))))
        self.y1 = min(fh, int(math.ceil(by + bh + 1 + max(dy.max(), 0.0))))
        s = SUPERSAMPLE
        offs = (np.arange(s) + 0.5) / s - 0.5
        self.sx = (np.arange(self.x0, self.x1)[:, None] + offs[None, :]).ravel()
        self.sy = (np.arange(self.y0, self.y1)[:, None] + offs[None, :]).ravel()

    def frame(self, dx: float, dy: float) -> np.ndarray:
        spec = self.spec
        bx, by, bw, bh = spec.beam_rect
        m = self.MARGIN
        lx = self.sx - dx - bx  # beam-local coordinates of every subsample
        ly = self.sy - dy - by
        inside_x = (lx >= -0.5) & (lx < bw - 0.5)
        inside_y = (ly >= -0.5) & (ly < bh - 0.5)
        gy, gx = np.meshgrid(ly + m, lx + m, indexing="ij")
        tex = map_coordinates(self.coeffs, [gy, gx], order=3, mode="mirror", prefilter=False)
        inside = inside_y[:, None] & inside_x[None, :]
        s = SUPERSAMPLE
        ny, nx = self.y1 - self.y0, self.x1 - self.x0
        bg = np.repeat(np.repeat(self.background[self.y0:self.y1, self.x0:self.x1], s, 0), s, 1)
        sub = np.where(inside, tex, bg)
        out = self.background.copy()
        out[self.y0:self.y1, self.x0:self.x1] = sub.reshape(ny, s, nx, s).mean(axis=(1, 3))
        return out


def occlusion_indices(n_frames: int, frame_rate: float, start_s: float, end_s: float) -> np.ndarray:
    """Frame indices whose time falls in ``[start_s, end_s)``."""
    t = np.arange(n_frames) / frame_rate
    eps = 1e-9
    return np.flatnonzero((t >= start_s - eps) & (t < end_s - eps))


def occlude(frames, start_s: float, end_s: float, frame_rate: float,
            intensity: float = OCCLUDER_INTENSITY) -> list:
    """Replace every frame in ``[start_s, end_s)`` by a uniform raster."""
    frames = list(frames)
    if not start_s < end_s:
        raise ValueError(f"occlusion needs start < end, got [{start_s}, {end_s})")
    out = list(frames)
    for i in occlusion_indices(len(frames), frame_rate, start_s, end_s):
        out[i] = np.full_like(np.asarray(frames[i], dtype=np.float64), intensity)
    return out


def render_sequence(spec: SceneSpec, seed: int = 0):
    """Render every frame of ``spec``; returns ``(frames, truth)``."""
    spec.validate()
    renderer = _Renderer(spec, seed)
    times = spec.times
    dx, dy = spec.displacement(times)
    ill = spec.illumination
    frames = []
    for i in range(spec.n_frames):
        img = renderer.frame(dx[i], dy[i])
        if ill.gain_per_frame or ill.bias_per_frame:
            img = (1.0 + ill.gain_per_frame * i) * img + ill.bias_per_frame * i
        if spec.noise_sigma > 0:
            img = img + _rng(seed, 2, i).normal(0.0, spec.noise_sigma, img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
    occluded = np.zeros(spec.n_frames, dtype=bool)
    if spec.occlusion is not None:
        o = spec.occlusion
        frames = occlude(frames, o.start_s, o.end_s, spec.frame_rate, o.intensity)
        occluded[occlusion_indices(spec.n_frames, spec.frame_rate, o.start_s, o.end_s)] = True
    return frames, GroundTruth(times, dx, dy, occluded)


def write_sequence(out_dir, frames, truth: GroundTruth, fmt: str = "png") -> list:
    out = Path(out_dir)
    paths = fio.write_frames(out, frames, fmt)
    truth.write_csv(out / "truth.csv")
    return paths
