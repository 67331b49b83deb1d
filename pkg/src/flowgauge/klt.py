"""Shi-Tomasi features and pyramidal Lucas-Kanade tracking.

This is the frame-to-frame baseline: per-frame motion is integrated over
time, so tracking errors accumulate and lost points never come back.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .errors import DimensionError, StateError
from .image import build_pyramid, gradient, sample


class Status(enum.Enum):
    ACTIVE = "active"
    LOST = "lost"


@dataclass(frozen=True)
class FeaturePoint:
    x: float
    y: float
    min_eigenvalue: float
    status: Status = Status.ACTIVE

    @property
    def active(self) -> bool:
        return self.status is Status.ACTIVE


@dataclass(frozen=True)
class TrackState:
    """Current feature positions and their integrated displacement."""

    points: list
    cumulative_disp: np.ndarray = field(default=None)

    def __post_init__(self):
        disp = self.cumulative_disp
        if disp is None:
            disp = np.zeros((len(self.points), 2))
        disp = np.asarray(disp, dtype=np.float64).reshape(-1, 2)
        if len(disp) != len(self.points):
            raise ValueError(f"{len(disp)} displacements for {len(self.points)} points")
        object.__setattr__(self, "cumulative_disp", disp)

    @classmethod
    def start(cls, points) -> "TrackState":
        return cls(list(points))

    @property
    def n_lost(self) -> int:
        return sum(not p.active for p in self.points)


def min_eigenvalue_map(img: np.ndarray, window: int = 7) -> np.ndarray:
    """Smaller eigenvalue of the window-averaged structure tensor per pixel."""
    ix, iy = gradient(img)
    a = uniform_filter(ix * ix, window, mode="nearest")
    b = uniform_filter(ix * iy, window, mode="nearest")
    c = uniform_filter(iy * iy, window, mode="nearest")
    half_trace = 0.5 * (a + c)
    return np.maximum(half_trace - np.sqrt((0.5 * (a - c)) ** 2 + b * b), 0.0)


def detect_features(img: np.ndarray, max_count: int = 200, quality: float = 0.01,
                    min_distance: float = 5.0, window: int = 7) -> list:
    """Shi-Tomasi corners sorted by descending score.

    Candidates are 3x3 local maxima of the minimum-eigenvalue map whose
    score reaches ``quality`` times the global maximum and whose window lies
    inside the image. Greedy suppression enforces ``min_distance``.
    """
    if not 0 < quality < 1:
        raise ValueError(f"quality must lie in (0, 1), got {quality}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < window or w < window:
        raise DimensionError(f"image {img.shape} smaller than the {window}x{window} window")
    score = min_eigenvalue_map(img, window)
    top = score.max()
    if top <= 1e-12:
        return []
    r = window // 2
    cand = (score >= quality * top) & (score == maximum_filter(score, size=3, mode="nearest"))
    inner = np.zeros_like(cand)
    inner[r:h - r, r:w - r] = True
    ys, xs = np.nonzero(cand & inner)
    order = np.argsort(-score[ys, xs], kind="stable")
    kept: list[FeaturePoint] = []
    md2 = float(min_distance) ** 2
    for k in order:
        x, y = float(xs[k]), float(ys[k])
        if all((x - p.x) ** 2 + (y - p.y) ** 2 >= md2 for p in kept):
            kept.append(FeaturePoint(x, y, float(score[ys[k], xs[k]])))
            if len(kept) >= max_count:
                break
    return kept


def _window_offsets(window: int):
    r = window // 2
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    return ox.ravel().astype(np.float64), oy.ravel().astype(np.float64)


def track_lk(prev: np.ndarray, nxt: np.ndarray, state: TrackState, window: int = 7, levels: int = 3,
             eig_floor: float = 1e-4, max_iter: int = 20, tol: float = 0.01,
             max_residual: float = 0.1) -> TrackState:
    """Advance every ACTIVE point from ``prev`` to ``nxt``.

    Each point solves the windowed Lucas-Kanade system with Newton-style
    refinement, coarse to fine over ``levels`` pyramid levels. A point is
    marked LOST when its normalised minimum eigenvalue falls below
    ``eig_floor``, when it leaves the image, or when the final mean
    absolute intensity residual exceeds ``max_residual`` without the
    update converging.
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise DimensionError(f"frames differ in size: {prev.shape} vs {nxt.shape}")
    active = np.array([p.active for p in state.points], dtype=bool)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return state
    h, w = prev.shape
    px = np.array([state.points[i].x for i in idx])
    py = np.array([state.points[i].y for i in idx])

    pyr_p = build_pyramid(prev, 0.5, 8)
    pyr_n = build_pyramid(nxt, 0.5, 8)
    n_lv = min(levels, len(pyr_p))
    ox, oy = _window_offsets(window)
    npix = ox.size

    guess = np.zeros((idx.size, 2))
    eig = np.zeros(idx.size)
    converged = np.ones(idx.size, dtype=bool)
    resid = np.zeros(idx.size)
    for lv in range(n_lv - 1, -1, -1):
        ip, inn = pyr_p[lv], pyr_n[lv]
        rx, ry = pyr_p.ratios[lv]
        gx, gy = gradient(ip)
        # pixel-centre mapping of the pyramid resampling
        wx = ((px + 0.5) * rx - 0.5)[:, None] + ox[None, :]
        wy = ((py + 0.5) * ry - 0.5)[:, None] + oy[None, :]
        tmpl = sample(ip, wx, wy)
        tx, ty = sample(gx, wx, wy), sample(gy, wx, wy)
        g11 = (tx * tx).sum(1)
        g12 = (tx * ty).sum(1)
        g22 = (ty * ty).sum(1)
        det = g11 * g22 - g12 * g12
        safe = np.where(np.abs(det) > 1e-18, det, 1.0)
        d = np.zeros_like(guess)
        done = np.zeros(idx.size, dtype=bool)
        for _ in range(max_iter):
            cur = sample(inn, wx + (guess[:, 0] + d[:, 0])[:, None], wy + (guess[:, 1] + d[:, 1])[:, None])
            err = tmpl - cur
            b1 = (err * tx).sum(1)
            b2 = (err * ty).sum(1)
            step_x = (g22 * b1 - g12 * b2) / safe
            step_y = (g11 * b2 - g12 * b1) / safe
            step_x[done] = 0.0
            step_y[done] = 0.0
            d[:, 0] += step_x
            d[:, 1] += step_y
            done |= np.hypot(step_x, step_y) < tol
            if done.all():
                break
        if lv == 0:
            half = 0.5 * (g11 + g22)
            eig = (half - np.sqrt((0.5 * (g11 - g22)) ** 2 + g12 * g12)) / npix
            converged = done
            cur = sample(inn, wx + (guess[:, 0] + d[:, 0])[:, None], wy + (guess[:, 1] + d[:, 1])[:, None])
            resid = np.abs(tmpl - cur).mean(1)
            guess = guess + d
        else:
            nrx, nry = pyr_p.ratios[lv - 1]
            guess = (guess + d) * np.array([nrx / rx, nry / ry])

    nx, ny = px + guess[:, 0], py + guess[:, 1]
    lost = ((eig < eig_floor) | (nx < 0) | (nx > w - 1) | (ny < 0) | (ny > h - 1)
            | ~np.isfinite(nx) | ~np.isfinite(ny) | (~converged & (resid > max_residual))
            | (resid > 2 * max_residual))
    points = list(state.points)
    disp = state.cumulative_disp.copy()
    for j, i in enumerate(idx):
        p = points[i]
        if lost[j]:
            points[i] = replace(p, status=Status.LOST)
        else:
            points[i] = FeaturePoint(float(nx[j]), float(ny[j]), float(eig[j]))
            disp[i] += guess[j]
    return TrackState(points, disp)


def track_sequence_klt(frames, points=None, **kwargs) -> list:
    """Run :func:`track_lk` frame to frame; returns one TrackState per frame."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("KLT tracking needs at least 2 frames")
    if points is None:
        points = detect_features(frames[0])
    history = [TrackState.start(points)]
    for prev, nxt in zip(frames[:-1], frames[1:]):
        history.append(track_lk(prev, nxt, history[-1], **kwargs))
    return history


def integrate_displacement(history, axis="horizontal", frame_rate: float = 1.0):
    """Stack per-frame cumulative displacements into a DisplacementMatrix.

    LOST points keep their last valid cumulative value, since
    :func:`track_lk` stops updating them.
    """
    from .pipeline import Axis, DisplacementMatrix

    history = list(history)
    if not history:
        raise StateError("empty tracking history")
    ax = Axis.parse(axis)
    disp = np.stack([s.cumulative_disp for s in history])  # T x M x 2
    pois = np.array([(p.x, p.y) for p in history[0].points], dtype=np.float64).reshape(-1, 2)
    return DisplacementMatrix(ax.select(disp[..., 0], disp[..., 1]), pois, ax, frame_rate)
