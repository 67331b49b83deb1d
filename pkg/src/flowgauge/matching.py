"""Hierarchical correlation matching (DeepMatching without deformations).

The reference image is cut into non-overlapping 4x4 atomic patches. Each
patch is correlated (NCC) with the target, giving one response map per
patch. Response maps of four neighbouring patches are max-pooled,
subsampled, aligned, averaged and rectified into the response map of their
8x8 parent, and so on up to ``max_patch_size``. Correspondences are read
out top-down: local maxima of the coarsest maps are refined through the
child maps down to the atomic patches.

Response maps are stored in target pixel coordinates: ``scores[i, j]`` is
the score of placing the patch centre at ``origin + stride * (j, i)``
(x, y). Without a search radius every map spans the whole target
(``origin = (0, 0)``); with ``search_radius = R`` each map only spans
``centre +- R``, which keeps memory linear in the image size.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import DimensionError, StateError
from .image import sample

ATOM = 4
QUADRANTS = ((-1, -1), (1, -1), (-1, 1), (1, 1))  # TL, TR, BL, BR as (sx, sy)


@dataclass(frozen=True)
class MatchingConfig:
    max_patch_size: int = 32
    rect_power: float = 1.4
    flat_eps: float = 1e-3
    maxima_threshold: float = 0.1
    local_search_radius: int = 2
    search_radius: int | None = None
    subpixel: bool = False
    subpixel_radius: int = 4

    def __post_init__(self):
        m = self.max_patch_size
        if m < 8 or m & (m - 1):
            raise ValueError(f"max_patch_size must be a power of two >= 8, got {m}")
        if self.rect_power <= 0:
            raise ValueError("rect_power must be positive")
        if self.local_search_radius < 0:
            raise ValueError("local_search_radius must be >= 0")
        if self.search_radius is not None and self.search_radius < 1:
            raise ValueError("search_radius must be >= 1 or None")
        if self.subpixel_radius < 1:
            raise ValueError("subpixel_radius must be >= 1")


@dataclass(frozen=True)
class AtomicPatch:
    center: tuple  # (x, y)
    data: np.ndarray | None  # mean-free, unit-norm 4x4; None when flat

    @property
    def flat(self) -> bool:
        return self.data is None


@dataclass(frozen=True)
class ResponseMap:
    patch_center: tuple
    patch_size: int
    scores: np.ndarray
    stride: int
    origin: tuple = (0, 0)

    def position(self, i, j):
        """Target (x, y) of ``scores[i, j]``."""
        return self.origin[0] + self.stride * j, self.origin[1] + self.stride * i

    def argmax_position(self):
        i, j = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return self.position(i, j)


@dataclass(frozen=True)
class Correspondence:
    ref_x: int
    ref_y: int
    tgt_x: float
    tgt_y: float
    score: float

    @property
    def displacement(self):
        return self.tgt_x - self.ref_x, self.tgt_y - self.ref_y


@dataclass
class PyramidLevel:
    """All response maps of one patch size, batched.

    ``children[k]`` holds the indices (TL, TR, BL, BR) of patch ``k``'s
    children in the previous level; ``parent[k]`` is ``-1`` when the patch
    was not aggregated further.
    """

    patch_size: int
    stride: int
    grid_shape: tuple
    centers: np.ndarray
    origins: np.ndarray
    scores: np.ndarray
    valid: np.ndarray
    children: np.ndarray | None = None
    parent: np.ndarray | None = None

    def __len__(self):
        return len(self.centers)

    def response_map(self, k: int) -> ResponseMap:
        return ResponseMap(tuple(int(c) for c in self.centers[k]), self.patch_size,
                           self.scores[k], self.stride, tuple(int(o) for o in self.origins[k]))


@dataclass
class CorrelationPyramid:
    levels: list
    ref_shape: tuple
    tgt_shape: tuple
    config: MatchingConfig = field(default_factory=MatchingConfig)

    def __len__(self):
        return len(self.levels)


def _normalize(win: np.ndarray, flat_eps: float):
    """Mean-free unit-norm rows of ``win`` (..., 16); flat rows become zero."""
    centred = win - win.mean(axis=-1, keepdims=True)
    norm = np.sqrt(np.sum(centred * centred, axis=-1, keepdims=True))
    flat = norm / np.sqrt(win.shape[-1]) < flat_eps
    out = np.where(flat, 0.0, centred / np.where(flat, 1.0, norm))
    return out, flat[..., 0]


def extract_atomic_patches(ref: np.ndarray, flat_eps: float = 1e-3) -> list:
    """Non-overlapping 4x4 patches in row-major order, centre = top-left + 2."""
    ref = np.asarray(ref, dtype=np.float64)
    h, w = ref.shape
    if h < ATOM or w < ATOM:
        raise DimensionError(f"image {ref.shape} is smaller than one 4x4 patch")
    ny, nx = h // ATOM, w // ATOM
    blocks = ref[:ny * ATOM, :nx * ATOM].reshape(ny, ATOM, nx, ATOM).transpose(0, 2, 1, 3)
    normed, flat = _normalize(blocks.reshape(ny, nx, ATOM * ATOM), flat_eps)
    patches = []
    for iy in range(ny):
        for ix in range(nx):
            data = None if flat[iy, ix] else normed[iy, ix].reshape(ATOM, ATOM)
            patches.append(AtomicPatch((ATOM * ix + 2, ATOM * iy + 2), data))
    return patches


def normalized_windows(tgt: np.ndarray, flat_eps: float = 1e-3, pad: int = 0) -> np.ndarray:
    """Normalised 4x4 windows centred on every pixel of ``tgt``.

    Returns ``(H + 2 pad, W + 2 pad, 16)``; entry ``[y + pad, x + pad]``
    belongs to the window with top-left ``(x - 2, y - 2)``. Pixels outside
    the image are clamped.
    """
    tgt = np.asarray(tgt, dtype=np.float64)
    padded = np.pad(tgt, ((pad + 2, pad + 1), (pad + 2, pad + 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (ATOM, ATOM))
    h, w = win.shape[:2]
    normed, _ = _normalize(win.reshape(h, w, ATOM * ATOM), flat_eps)
    return normed


def correlate_patch(patch, tgt: np.ndarray, flat_eps: float = 1e-3, center=(0, 0)) -> ResponseMap:
    """Clamped NCC of one normalised 4x4 patch at every target position.

    ``patch`` is either an :class:`AtomicPatch` or a normalised 4x4 array.
    """
    if isinstance(patch, AtomicPatch):
        if patch.flat:
            raise ValueError("cannot correlate a FLAT patch")
        center, data = patch.center, patch.data
    else:
        data = np.asarray(patch, dtype=np.float64)
    windows = normalized_windows(tgt, flat_eps)
    scores = np.maximum(windows @ data.reshape(-1), 0.0)
    return ResponseMap(tuple(center), ATOM, scores, 1, (0, 0))


def _shift_bounds(h, w, sy, sx):
    di0, di1 = max(0, -sy), min(h, h - sy)
    dj0, dj1 = max(0, -sx), min(w, w - sx)
    return di0, max(di1, di0), dj0, max(dj1, dj0)


def _shift(maps: np.ndarray, sy: int, sx: int) -> np.ndarray:
    """``out[..., i, j] = maps[..., i + sy, j + sx]``, zero outside."""
    out = np.zeros_like(maps)
    di0, di1, dj0, dj1 = _shift_bounds(*maps.shape[-2:], sy, sx)
    out[..., di0:di1, dj0:dj1] = maps[..., di0 + sy:di1 + sy, dj0 + sx:dj1 + sx]
    return out


def pool_subsample(maps: np.ndarray) -> np.ndarray:
    """3x3 max-pool (stride 1) then keep every second row and column."""
    size = (1,) * (maps.ndim - 2) + (3, 3)
    pooled = maximum_filter(maps, size=size, mode="constant", cval=0.0)
    return pooled[..., ::2, ::2]


def _aggregate(child_maps, child_valid, child_origins, child_centers, child_stride, rect_power):
    """Batched aggregation.

    ``child_maps`` is ``(4, n, h, w)`` in quadrant order; the other child
    arrays are indexed ``[quadrant, parent]``. Returns parent maps,
    validity, origins and centres.
    """
    sub = pool_subsample(child_maps)
    new_stride = 2 * child_stride
    parent_centers = child_centers.mean(axis=0)
    offsets = child_centers - parent_centers[None]
    parent_origins = np.rint((child_origins - offsets).mean(axis=0)).astype(np.int64)
    n, h, w = sub.shape[1:]
    acc = np.zeros((n, h, w), dtype=sub.dtype)
    count = np.zeros((n, h, w), dtype=sub.dtype)
    for q in range(4):
        shift = (parent_origins - child_origins[q] + offsets[q]) / new_stride
        if not np.all(shift == np.rint(shift)) or not np.all(shift == shift[0]):
            raise StateError("children are not aligned on the parent grid")
        sx, sy = (int(s) for s in shift[0])
        valid = child_valid[q]
        acc[valid] += _shift(sub[q][valid], sy, sx)
        # placements whose child lands outside the child map carry no evidence
        di0, di1, dj0, dj1 = _shift_bounds(h, w, sy, sx)
        count[valid, di0:di1, dj0:dj1] += 1
    np.divide(acc, count, out=acc, where=count > 0)
    np.power(acc, rect_power, out=acc)
    ok = np.any(child_valid, axis=0)
    return acc, ok, parent_origins, np.rint(parent_centers).astype(np.int64)


def aggregate_level(children, rect_power: float = 1.4) -> ResponseMap:
    """Aggregate the response maps of four quadrant children (TL, TR, BL, BR)."""
    children = list(children)
    if len(children) != 4:
        raise ValueError("aggregate_level needs exactly 4 children")
    strides = {c.stride for c in children}
    sizes = {c.patch_size for c in children}
    shapes = {c.scores.shape for c in children}
    if len(strides) != 1 or len(sizes) != 1 or len(shapes) != 1:
        raise StateError("children have mismatched strides, sizes or map shapes")
    maps = np.stack([np.asarray(c.scores, dtype=np.float64) for c in children])[:, None]
    origins = np.array([c.origin for c in children], dtype=np.float64)[:, None]
    centers = np.array([c.patch_center for c in children], dtype=np.float64)[:, None]
    valid = np.ones((4, 1), dtype=bool)
    acc, _, porig, pcent = _aggregate(maps, valid, origins, centers, children[0].stride, rect_power)
    return ResponseMap(tuple(int(c) for c in pcent[0]), 2 * children[0].patch_size, acc[0],
                       2 * children[0].stride, tuple(int(o) for o in porig[0]))


def _level0(ref, tgt, cfg: MatchingConfig) -> PyramidLevel:
    patches = extract_atomic_patches(ref, cfg.flat_eps)
    ny, nx = ref.shape[0] // ATOM, ref.shape[1] // ATOM
    centers = np.array([p.center for p in patches], dtype=np.int64).reshape(-1, 2)
    valid = np.array([not p.flat for p in patches], dtype=bool)
    data = np.zeros((len(patches), ATOM * ATOM))
    for k, p in enumerate(patches):
        if not p.flat:
            data[k] = p.data.reshape(-1)
    data = data.astype(np.float32)
    h, w = tgt.shape
    r = cfg.search_radius
    if r is None:
        windows = normalized_windows(tgt, cfg.flat_eps).astype(np.float32)
        scores = data @ windows.reshape(-1, ATOM * ATOM).T
        scores = scores.reshape(len(patches), h, w)
        origins = np.zeros_like(centers)
    else:
        windows = normalized_windows(tgt, cfg.flat_eps, pad=r).astype(np.float32)
        side = 2 * r + 1
        scores = np.empty((len(patches), side, side), dtype=np.float32)
        cy, cx = centers[:, 1] + r, centers[:, 0] + r
        for i, dy in enumerate(range(-r, r + 1)):
            rows = cy + dy
            for j, dx in enumerate(range(-r, r + 1)):
                scores[:, i, j] = np.einsum("kc,kc->k", data, windows[rows, cx + dx])
        origins = centers - r
    np.maximum(scores, 0.0, out=scores)
    scores[~valid] = 0.0
    return PyramidLevel(ATOM, 1, (ny, nx), centers, origins, scores, valid)


def build_pyramid(ref: np.ndarray, tgt: np.ndarray, max_patch_size: int | None = None,
                  config: MatchingConfig | None = None) -> CorrelationPyramid:
    """Bottom-up correlation pyramid from 4x4 patches to ``max_patch_size``."""
    cfg = config or MatchingConfig()
    if max_patch_size is not None and max_patch_size != cfg.max_patch_size:
        cfg = MatchingConfig(**{**cfg.__dict__, "max_patch_size": max_patch_size})
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if ref.shape != tgt.shape:
        raise DimensionError(f"reference {ref.shape} and target {tgt.shape} differ")
    level = _level0(ref, tgt, cfg)
    levels = [level]
    while level.patch_size * 2 <= cfg.max_patch_size:
        ny, nx = level.grid_shape[0] // 2, level.grid_shape[1] // 2
        if ny < 1 or nx < 1:
            break
        jy, jx = np.mgrid[0:ny, 0:nx]
        jy, jx = jy.ravel(), jx.ravel()
        gnx = level.grid_shape[1]
        children = np.stack([(2 * jy + (sy > 0)) * gnx + 2 * jx + (sx > 0) for sx, sy in QUADRANTS], axis=1)
        parent = np.full(len(level), -1, dtype=np.int64)
        for q in range(4):
            parent[children[:, q]] = np.arange(len(children))
        level.parent = parent
        idx = children.T
        maps, valid, origins, centers = _aggregate(
            level.scores[idx], level.valid[idx], level.origins[idx].astype(np.float64),
            level.centers[idx].astype(np.float64), level.stride, cfg.rect_power)
        level = PyramidLevel(level.patch_size * 2, level.stride * 2, (ny, nx), centers, origins,
                             maps, valid, children=children)
        levels.append(level)
    level.parent = np.full(len(level), -1, dtype=np.int64)
    return CorrelationPyramid(levels, ref.shape, tgt.shape, cfg)


def _local_maxima(scores: np.ndarray, threshold: float):
    peak = maximum_filter(scores, size=3, mode="constant", cval=-np.inf)
    ii, jj = np.nonzero((scores >= peak) & (scores >= threshold))
    return list(zip(ii.tolist(), jj.tolist()))


class _Backtracker:
    def __init__(self, pyramid: CorrelationPyramid):
        self.levels = pyramid.levels
        self.radius = pyramid.config.local_search_radius
        self.memo = {}

    def descend(self, li: int, k: int, pos: tuple):
        """Leaves reachable from patch ``k`` of level ``li`` placed at ``pos``.

        Returns a list of ``(patch index, tgt x, tgt y, score sum)``.
        """
        key = (li, k, pos)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        if li == 0:
            out = [(k, pos[0], pos[1], 0.0)]
            self.memo[key] = out
            return out
        child_level = self.levels[li - 1]
        stride = child_level.stride
        r = self.radius
        out = []
        for c in self.levels[li].children[k]:
            if not child_level.valid[c]:
                continue
            cx, cy = child_level.centers[c]
            pcx, pcy = self.levels[li].centers[k]
            ox, oy = child_level.origins[c]
            sc = child_level.scores[c]
            h, w = sc.shape
            j = min(max(int(round((pos[0] + cx - pcx - ox) / stride)), 0), w - 1)
            i = min(max(int(round((pos[1] + cy - pcy - oy) / stride)), 0), h - 1)
            i0, j0 = max(i - r, 0), max(j - r, 0)
            win = sc[i0:i + r + 1, j0:j + r + 1]
            bi, bj = np.unravel_index(int(np.argmax(win)), win.shape)
            best = float(win[bi, bj])
            cpos = (int(ox + stride * (j0 + bj)), int(oy + stride * (i0 + bi)))
            for leaf, tx, ty, s in self.descend(li - 1, int(c), cpos):
                out.append((leaf, tx, ty, s + best))
        self.memo[key] = out
        return out


def backtrack(pyramid: CorrelationPyramid) -> list:
    """Quasi-dense correspondences from the local maxima of the root maps.

    Roots are the patches that were not aggregated further (the whole top
    level plus remainders along the right/bottom edges). Each correspondence
    is scored by the mean response along its path from the root; for every
    reference point only the best-scoring correspondence is kept. Output is
    sorted by ``(ref_y, ref_x)``.
    """
    if pyramid is None or len(pyramid.levels) == 0:
        raise StateError("backtrack needs a pyramid with at least one level")
    cfg = pyramid.config
    h, w = pyramid.tgt_shape
    tracker = _Backtracker(pyramid)
    centers0 = pyramid.levels[0].centers
    best = {}
    for li, level in enumerate(pyramid.levels):
        path_len = li + 1
        for k in np.nonzero((level.parent < 0) & level.valid)[0]:
            rmap = level.response_map(int(k))
            for i, j in _local_maxima(rmap.scores, cfg.maxima_threshold):
                root_score = float(rmap.scores[i, j])
                for leaf, tx, ty, s in tracker.descend(li, int(k), rmap.position(i, j)):
                    if not (0 <= tx < w and 0 <= ty < h):
                        continue
                    score = (root_score + s) / path_len
                    rx, ry = (int(v) for v in centers0[leaf])
                    prev = best.get((ry, rx))
                    if prev is None or score > prev.score:
                        best[(ry, rx)] = Correspondence(rx, ry, int(tx), int(ty), score)
    return [best[key] for key in sorted(best)]


def _parabola_vertex(left, centre, right):
    den = left - 2.0 * centre + right
    safe = np.where(den < 0, den, -1.0)
    return np.where(den < 0, np.clip(0.5 * (left - right) / safe, -0.5, 0.5), 0.0)


def refine_subpixel(matches, ref: np.ndarray, tgt: np.ndarray, radius: int = 4) -> list:
    """Move each target point to the vertex of a parabola fitted, per axis,
    through the NCC of a ``2r x 2r`` window at the match and its 4-neighbours.

    The offset is clipped to half a pixel; a non-concave profile along an
    axis, or a perfect correlation at the match itself, leaves the
    coordinate unchanged.
    """
    if not matches:
        return []
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    oy, ox = np.mgrid[-radius:radius, -radius:radius]
    ox = ox.ravel() + 0.5
    oy = oy.ravel() + 0.5
    rx = np.array([m.ref_x for m in matches], dtype=np.float64)[:, None]
    ry = np.array([m.ref_y for m in matches], dtype=np.float64)[:, None]
    tx = np.array([m.tgt_x for m in matches], dtype=np.float64)[:, None]
    ty = np.array([m.tgt_y for m in matches], dtype=np.float64)[:, None]

    def zero_mean_unit(win):
        win = win - win.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(win, axis=1, keepdims=True)
        return win / np.where(norm > 1e-12, norm, np.inf)

    a = zero_mean_unit(sample(ref, rx + ox, ry + oy))

    def ncc(dx, dy):
        return (a * zero_mean_unit(sample(tgt, tx + dx + ox, ty + dy + oy))).sum(axis=1)

    c0 = ncc(0, 0)
    # NCC never exceeds 1, so a perfect match already sits on the peak
    exact = c0 >= 1.0 - 1e-9
    fx = np.where(exact, 0.0, _parabola_vertex(ncc(-1, 0), c0, ncc(1, 0)))
    fy = np.where(exact, 0.0, _parabola_vertex(ncc(0, -1), c0, ncc(0, 1)))
    return [Correspondence(m.ref_x, m.ref_y, float(m.tgt_x + ox_), float(m.tgt_y + oy_), m.score)
            for m, ox_, oy_ in zip(matches, fx, fy)]


def deep_match(ref: np.ndarray, tgt: np.ndarray, config: MatchingConfig | None = None) -> list:
    """Correspondences from ``ref`` to ``tgt``.

    Target points are integer pixels unless ``config.subpixel`` asks for
    :func:`refine_subpixel`.
    """
    cfg = config or MatchingConfig()
    matches = backtrack(build_pyramid(ref, tgt, config=cfg))
    if cfg.subpixel:
        matches = refine_subpixel(matches, ref, tgt, cfg.subpixel_radius)
    return matches


def _number(text):
    value = float(text)
    return int(value) if value.is_integer() else value


def write_correspondences(path, matches) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ref_x", "ref_y", "tgt_x", "tgt_y", "score"])
        for m in matches:
            wr.writerow([m.ref_x, m.ref_y, f"{m.tgt_x:g}", f"{m.tgt_y:g}", f"{m.score:.6f}"])


def read_correspondences(path) -> list:
    with open(path, newline="") as fh:
        return [Correspondence(int(r["ref_x"]), int(r["ref_y"]), _number(r["tgt_x"]), _number(r["tgt_y"]),
                               float(r["score"])) for r in csv.DictReader(fh)]
