"""Reference-frame displacement tracking, outlier filtering and averaging.

Every frame is compared against one fixed reference frame, so the measured
displacement never integrates frame-to-frame errors. Per-point series are
then screened twice (motion amplitude, then mutual correlation) before the
survivors are averaged into a single signal.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import matching
from .calibration import CameraModel, pixels_to_mm
from .errors import DimensionError, EmptyResultError, FlowGaugeError, PipelineError
from .flow import EnergyParams, rasterize_matches, solve_flow
from .image import as_gray, sample

log = logging.getLogger(__name__)

DEFAULT_SEARCH_RADIUS = 16
DEFAULT_PRESMOOTH = 1.0


class Axis(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    MAGNITUDE = "magnitude"

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"axis must be one of {[a.value for a in cls]}, got {value!r}") from None

    def select(self, u, v):
        if self is Axis.HORIZONTAL:
            return np.asarray(u)
        if self is Axis.VERTICAL:
            return np.asarray(v)
        return np.hypot(u, v)


@dataclass(frozen=True)
class POIMask:
    """Binary mask over a crop rectangle ``(x, y, w, h)`` of the full frame."""

    crop: tuple
    mask: np.ndarray

    def __post_init__(self):
        x, y, w, h = (int(c) for c in self.crop)
        if w <= 0 or h <= 0 or x < 0 or y < 0:
            raise ValueError(f"invalid crop rectangle {self.crop}")
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != (h, w):
            raise DimensionError(f"mask shape {mask.shape} does not match crop {w}x{h}")
        if not mask.any():
            raise ValueError("POI mask has no set pixels")
        object.__setattr__(self, "crop", (x, y, w, h))
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, crop) -> "POIMask":
        x, y, w, h = crop
        return cls(crop, np.ones((h, w), dtype=bool))

    @classmethod
    def from_points(cls, crop, points) -> "POIMask":
        x, y, w, h = crop
        mask = np.zeros((h, w), dtype=bool)
        for px, py in points:
            if not (0 <= px < w and 0 <= py < h):
                raise ValueError(f"POI ({px}, {py}) outside crop {w}x{h}")
            mask[int(py), int(px)] = True
        return cls(crop, mask)

    def check_frame(self, shape) -> None:
        x, y, w, h = self.crop
        if x + w > shape[1] or y + h > shape[0]:
            raise ValueError(f"crop {self.crop} exceeds frame {shape[1]}x{shape[0]}")

    def apply(self, frame: np.ndarray) -> np.ndarray:
        x, y, w, h = self.crop
        return frame[y:y + h, x:x + w]


def select_pois(mask: POIMask) -> list:
    """Crop-frame ``(x, y)`` of every set mask pixel, row-major."""
    ys, xs = np.nonzero(mask.mask)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


@dataclass(frozen=True)
class DisplacementMatrix:
    """``T x M`` displacements in pixels; column ``m`` belongs to ``pois[m]``.

    ``indices`` maps columns back to the original POI numbering so filtered
    matrices stay traceable.
    """

    data: np.ndarray
    pois: np.ndarray
    axis: Axis = Axis.HORIZONTAL
    frame_rate: float = 1.0
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"displacement matrix must be 2-D, got {data.shape}")
        pois = np.asarray(self.pois, dtype=np.float64).reshape(-1, 2)
        if len(pois) != data.shape[1]:
            raise DimensionError(f"{len(pois)} POIs for {data.shape[1]} columns")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement matrix contains non-finite entries")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        idx = np.arange(data.shape[1]) if self.indices is None else np.asarray(self.indices, dtype=np.intp)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pois", pois)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "axis", Axis.parse(self.axis))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_pois(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.frames) / self.frame_rate

    def columns(self, keep) -> "DisplacementMatrix":
        keep = np.asarray(keep)
        return DisplacementMatrix(self.data[:, keep], self.pois[keep], self.axis, self.frame_rate,
                                  self.indices[keep])

    def with_data(self, data) -> "DisplacementMatrix":
        return DisplacementMatrix(data, self.pois, self.axis, self.frame_rate, self.indices)


class ThresholdMode(enum.Enum):
    MEDIAN = "median"
    FIXED = "fixed"


@dataclass(frozen=True)
class FilterConfig:
    """``motion_threshold=None`` selects the median rule; a number fixes it."""

    motion_threshold: float | None = None
    mcr_threshold: float = 0.8

    def __post_init__(self):
        if self.motion_threshold is not None and not self.motion_threshold > 0:
            raise ValueError(f"fixed motion threshold must be > 0, got {self.motion_threshold}")
        if not 0.0 <= self.mcr_threshold <= 1.0:
            raise ValueError(f"mcr_threshold must lie in [0, 1], got {self.mcr_threshold}")

    @property
    def mode(self) -> ThresholdMode:
        return ThresholdMode.MEDIAN if self.motion_threshold is None else ThresholdMode.FIXED


def presmooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian denoising applied to frames before the variational solve.

    Bilinear warping averages neighbouring noise samples, which lowers the
    data residual at fractional offsets and pulls noisy static frames away
    from zero flow; suppressing pixel-scale noise first removes that pull.
    """
    return gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img


def _track_frame(ref, frame, prior_fn, params, xs, ys, axis, sigma, ref_smooth=None):
    prior = prior_fn(ref, frame)
    ref_s = ref_smooth if ref_smooth is not None else presmooth(ref, sigma)
    w = solve_flow(ref_s, presmooth(frame, sigma), prior, params)
    return axis.select(sample(w.u, xs, ys), sample(w.v, xs, ys))


def resolve_workers(workers: int | None) -> int:
    """Explicit value, else ``FLOWGAUGE_WORKERS``, else the CPU count."""
    if workers is None:
        env = os.environ.get("FLOWGAUGE_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def track_sequence(frames, pois, params: EnergyParams | None = None,
                   match_config: matching.MatchingConfig | None = None, axis="horizontal",
                   frame_rate: float = 1.0, workers: int | None = 1,
                   reference_update_interval: int | None = None,
                   presmooth_sigma: float = DEFAULT_PRESMOOTH) -> DisplacementMatrix:
    """Flow from the reference frame to every frame, sampled at the POIs.

    Frame 0 is the reference. With ``reference_update_interval = k`` the
    reference becomes frame ``k, 2k, ...`` and each new segment is offset by
    the displacement measured at its reference frame. Frames are processed
    by a pool of ``workers`` threads and assembled in frame order. Matching
    sees the raw frames; the flow solve sees them after :func:`presmooth`.
    """
    if presmooth_sigma < 0:
        raise ValueError(f"presmooth_sigma must be >= 0, got {presmooth_sigma}")
    frames = [as_gray(f) for f in frames]
    if len(frames) < 2:
        raise ValueError("fewer than 2 frames")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {f.shape}, expected {shape}")
    pts = np.asarray(pois, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("no POIs")
    if (pts[:, 0] < 0).any() or (pts[:, 0] > shape[1] - 1).any() or (pts[:, 1] < 0).any() \
            or (pts[:, 1] > shape[0] - 1).any():
        raise ValueError("POIs must lie inside the frame")
    if reference_update_interval is not None and reference_update_interval < 1:
        raise ValueError("reference_update_interval must be >= 1")
    ax = Axis.parse(axis)
    params = params or EnergyParams()
    mcfg = match_config or matching.MatchingConfig(search_radius=DEFAULT_SEARCH_RADIUS, subpixel=True)
    n = len(frames)
    interval = reference_update_interval or n

    def prior_fn(ref, frame):
        h, w = ref.shape
        return rasterize_matches(matching.deep_match(ref, frame, mcfg), w, h)

    def ref_of(i):
        return ((i - 1) // interval) * interval

    smoothed_refs = {k: presmooth(frames[k], presmooth_sigma) for k in sorted({ref_of(i) for i in range(1, n)})}

    def job(i):
        k = ref_of(i)
        try:
            return _track_frame(frames[k], frames[i], prior_fn, params, pts[:, 0], pts[:, 1], ax,
                                presmooth_sigma, smoothed_refs[k])
        except FlowGaugeError as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc

    jobs = list(range(1, n))
    data = np.zeros((n, len(pts)))
    nw = resolve_workers(workers)
    log.info("tracking %d frames x %d POIs with %d worker(s)", n - 1, len(pts), nw)
    if nw == 1:
        for i in jobs:
            data[i] = job(i)
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            for i, row in zip(jobs, pool.map(job, jobs)):
                data[i] = row
    for i in jobs:
        # chain segments: a later reference carries its own measured offset
        if ref_of(i) > 0:
            data[i] += data[ref_of(i)]
    return DisplacementMatrix(data, pts, ax, frame_rate)


def remove_offset(d: DisplacementMatrix) -> DisplacementMatrix:
    """Subtract each column's temporal mean."""
    if d.frames < 2:
        raise ValueError("offset removal needs at least 2 frames")
    return d.with_data(d.data - d.data.mean(axis=0, keepdims=True))


def motion_threshold(d: DisplacementMatrix, cfg: FilterConfig) -> float:
    if cfg.mode is ThresholdMode.FIXED:
        return float(cfg.motion_threshold)
    return float(np.median(np.abs(d.data).max(axis=0)))


def motion_filter(d: DisplacementMatrix, cfg: FilterConfig | None = None) -> DisplacementMatrix:
    """Keep columns whose peak absolute displacement reaches the threshold."""
    cfg = cfg or FilterConfig()
    if cfg.mode is ThresholdMode.MEDIAN and d.n_pois < 1:
        raise ValueError("median motion threshold needs at least one column")
    thr = motion_threshold(d, cfg)
    keep = np.flatnonzero(np.abs(d.data).max(axis=0) >= thr)
    if keep.size == 0:
        raise EmptyResultError(f"no POI reaches the motion threshold {thr:g} px")
    return d.columns(keep)


def correlation_matrix(data: np.ndarray) -> np.ndarray:
    """Pearson correlation between the columns of ``data``."""
    z = data - data.mean(axis=0)
    z = z / np.sqrt((z * z).sum(axis=0))
    return z.T @ z


def mean_cross_correlation(r: np.ndarray) -> np.ndarray:
    n = r.shape[0]
    if n < 2:
        return np.ones(n)
    return (r.sum(axis=1) - np.diag(r)) / (n - 1)


def correlation_filter(d: DisplacementMatrix, cfg: FilterConfig | None = None) -> DisplacementMatrix:
    """Keep columns whose mean correlation with the others reaches the MCR threshold.

    Zero-variance columns are dropped with a warning. A single remaining
    column has no partner to correlate with and passes through.
    """
    cfg = cfg or FilterConfig()
    std = d.data.std(axis=0)
    varying = np.flatnonzero(std > 0)
    if varying.size < d.n_pois:
        warnings.warn(f"dropping {d.n_pois - varying.size} zero-variance POI column(s) "
                      "before correlation filtering", RuntimeWarning, stacklevel=2)
    if varying.size == 0:
        raise EmptyResultError("every POI column has zero variance")
    d = d.columns(varying)
    if d.n_pois == 1:
        return d
    mcr = mean_cross_correlation(correlation_matrix(d.data))
    keep = np.flatnonzero(mcr >= cfg.mcr_threshold)
    if keep.size == 0:
        raise EmptyResultError(f"no POI reaches the mean cross-correlation threshold {cfg.mcr_threshold:g}")
    return d.columns(keep)


@dataclass(frozen=True)
class DisplacementResult:
    series_px: np.ndarray
    series_mm: np.ndarray
    retained_indices: list
    frame_rate: float = 1.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.retained_indices) < 1:
            raise ValueError("a result needs at least one retained POI")

    @property
    def retained_pois(self) -> int:
        return len(self.retained_indices)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.series_px)) / self.frame_rate


def average(d: DisplacementMatrix, model: CameraModel) -> DisplacementResult:
    """Mean over retained columns, converted to millimetres."""
    if d.n_pois < 1:
        raise ValueError("nothing to average")
    series = d.data.mean(axis=1)
    return DisplacementResult(series, pixels_to_mm(series, model), [int(i) for i in d.indices], d.frame_rate)


def post_process(d_raw: DisplacementMatrix, camera: CameraModel,
                 cfg: FilterConfig | None = None) -> DisplacementResult:
    """Offset removal, motion and correlation filtering, then averaging.

    When no column varies at all (a scene without motion) there is nothing
    to correlate, so the correlation stage passes the columns through
    instead of rejecting every one of them. Failures are re-raised as
    :class:`PipelineError` naming the stage.
    """
    cfg = cfg or FilterConfig()
    stage = "remove_offset"
    try:
        d_off = remove_offset(d_raw)
        stage = "motion_filter"
        d_mot = motion_filter(d_off, cfg)
        stage = "correlation_filter"
        if np.any(d_mot.data.std(axis=0) > 0):
            d_cor = correlation_filter(d_mot, cfg)
        else:
            d_cor = d_mot
        stage = "average"
        res = average(d_cor, camera)
    except (FlowGaugeError, ValueError, ArithmeticError) as exc:
        raise PipelineError(stage, str(exc)) from exc
    res.diagnostics.update(raw=d_raw, offset_removed=d_off, motion_filtered=d_mot,
                           correlation_filtered=d_cor, motion_threshold=motion_threshold(d_off, cfg),
                           mcr_threshold=cfg.mcr_threshold)
    return res


def run_pipeline(frames, mask: POIMask, camera: CameraModel, params: EnergyParams | None = None,
                 cfg: FilterConfig | None = None, match_config: matching.MatchingConfig | None = None,
                 axis="horizontal", frame_rate: float = 1.0, workers: int | None = 1,
                 reference_update_interval: int | None = None,
                 presmooth_sigma: float = DEFAULT_PRESMOOTH) -> DisplacementResult:
    """Mask, track, remove offsets, filter and average.

    Every intermediate matrix is stored in ``result.diagnostics``. Failures
    are re-raised as :class:`PipelineError` naming the stage.
    """
    stage = "select_pois"
    try:
        frames = list(frames)
        if frames:
            mask.check_frame(np.shape(frames[0]))
        pois = select_pois(mask)
        stage = "track_sequence"
        d_raw = track_sequence([mask.apply(np.asarray(f)) for f in frames], pois, params, match_config,
                               axis, frame_rate, workers, reference_update_interval, presmooth_sigma)
    except (FlowGaugeError, ValueError, ArithmeticError) as exc:
        raise PipelineError(stage, str(exc)) from exc
    return post_process(d_raw, camera, cfg)


def write_matrix_csv(path, d: DisplacementMatrix) -> None:
    """``frame,time_s,poi_0,...`` plus a sibling ``*_pois.csv`` coordinate table."""
    path = Path(path)
    header = "frame,time_s," + ",".join(f"poi_{int(i)}" for i in d.indices)
    lines = [header]
    for i, (t, row) in enumerate(zip(d.times, d.data)):
        lines.append(f"{i},{t:.9f}," + ",".join(f"{v:.6f}" for v in row))
    path.write_text("\n".join(lines) + "\n")
    poi_lines = ["poi,x,y"] + [f"{int(i)},{x:g},{y:g}" for i, (x, y) in zip(d.indices, d.pois)]
    path.with_name(path.stem + "_pois.csv").write_text("\n".join(poi_lines) + "\n")


def read_matrix_csv(path, axis="horizontal") -> DisplacementMatrix:
    path = Path(path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        names = fh.readline().strip().split(",")[2:]
    indices = [int(n.split("_", 1)[1]) for n in names]
    poi_path = path.with_name(path.stem + "_pois.csv")
    if poi_path.exists():
        pois = np.loadtxt(poi_path, delimiter=",", skiprows=1, ndmin=2)[:, 1:3]
    else:
        pois = np.zeros((len(indices), 2))
    times = raw[:, 1]
    rate = (len(times) - 1) / float(times[-1] - times[0]) if len(times) > 1 else 1.0
    return DisplacementMatrix(raw[:, 2:], pois, axis, rate, indices)


def write_result(path_csv, res: DisplacementResult, extra: dict | None = None) -> None:
    """``frame,time_s,disp_px,disp_mm`` CSV plus a JSON sidecar."""
    path_csv = Path(path_csv)
    lines = ["frame,time_s,disp_px,disp_mm"]
    for i, (t, px, mm) in enumerate(zip(res.times, res.series_px, res.series_mm)):
        lines.append(f"{i},{t:.6f},{px:.6f},{mm:.6f}")
    path_csv.write_text("\n".join(lines) + "\n")
    meta = {"n_d": res.retained_pois, "retained_indices": list(res.retained_indices),
            "frame_rate": res.frame_rate}
    for key in ("motion_threshold", "mcr_threshold"):
        if key in res.diagnostics:
            meta[key] = float(res.diagnostics[key])
    meta.update(extra or {})
    path_csv.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_series_csv(path):
    """Read ``(times, values)`` from a result CSV (mm column) or ``truth.csv`` (dx_px)."""
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    col = {n: k for k, n in enumerate(names)}
    for key in ("disp_mm", "dx_px", "disp_px"):
        if key in col:
            return data[:, col["time_s"]], data[:, col[key]], key
    raise ValueError(f"{path}: no displacement column among {names}")
