"""Variational dense optical flow with a sparse matching prior (DeepFlow).

The energy summed over pixels ``x`` is::

    delta * psi(|I2(x+w) - I1(x)|^2)
  + gamma * psi(|grad I2(x+w) - grad I1(x)|^2)
  + alpha * psi(|grad u|^2 + |grad v|^2)
  + beta  * c(x) * phi(x) * psi(|w - w'|^2)

with the Charbonnier penalty ``psi(s2) = sqrt(s2 + eps^2)``. It is
minimised coarse-to-fine; on every level the flow increment is found by
repeatedly linearising about the current warp and solving the resulting
sparse system with red-black SOR.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, NumericalError
from .image import (FlowField, build_pyramid, gradient, gradient_adjoint, pixel_grid, sample,
                    sample_with_derivatives, upsample_flow)

log = logging.getLogger(__name__)

DIVERGENCE_RATIO = 1.1


@dataclass(frozen=True)
class EnergyParams:
    alpha: float = 1.0
    beta: float = 0.3
    delta: float = 1.0
    gamma: float = 0.7
    psi_eps: float = 1e-3
    outer_iters: int = 5
    solver_iters: int = 30
    sor_omega: float = 1.6
    multigrid: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.psi_eps > 0:
            raise ValueError("psi_eps must be > 0")
        if not 0 < self.sor_omega < 2:
            raise ValueError("sor_omega must lie in (0, 2)")
        if self.outer_iters < 1 or self.solver_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass(frozen=True)
class MatchPrior:
    """Rasterised correspondences: target displacement ``(u, v)``, mask ``c``
    and confidence ``phi`` (zero wherever ``c`` is zero)."""

    u: np.ndarray
    v: np.ndarray
    c: np.ndarray
    phi: np.ndarray

    @property
    def shape(self):
        return self.c.shape

    @classmethod
    def empty(cls, shape) -> "MatchPrior":
        z = np.zeros(shape)
        return cls(z, z.copy(), np.zeros(shape, dtype=np.uint8), z.copy())

    @property
    def count(self) -> int:
        return int(self.c.sum())

    def downsample(self, rx: float, ry: float, shape) -> "MatchPrior":
        """Move every match to ``(round(x rx), round(y ry))`` with its vector
        scaled; on collisions the higher ``phi`` wins."""
        ys, xs = np.nonzero(self.c)
        out = MatchPrior.empty(shape)
        if len(xs) == 0:
            return out
        order = np.argsort(self.phi[ys, xs], kind="stable")
        ys, xs = ys[order], xs[order]
        h, w = shape
        ny = np.clip(np.rint(ys * ry).astype(np.intp), 0, h - 1)
        nx = np.clip(np.rint(xs * rx).astype(np.intp), 0, w - 1)
        # fancy assignment keeps the last write, i.e. the highest phi
        out.u[ny, nx] = self.u[ys, xs] * rx
        out.v[ny, nx] = self.v[ys, xs] * ry
        out.phi[ny, nx] = self.phi[ys, xs]
        out.c[ny, nx] = 1
        return out


def psi(s2, eps):
    return np.sqrt(s2 + eps * eps)


def psi_prime(s2, eps):
    """Derivative of :func:`psi` with respect to its squared argument."""
    return 0.5 / np.sqrt(s2 + eps * eps)


def rasterize_matches(matches, width: int, height: int) -> MatchPrior:
    """Turn correspondences into a :class:`MatchPrior` on the reference grid."""
    prior = MatchPrior.empty((height, width))
    matches = list(matches)
    if not matches:
        return prior
    top = max(m.score for m in matches)
    best = {}
    for m in matches:
        if not (0 <= m.ref_x < width and 0 <= m.ref_y < height):
            raise ValueError(f"match reference point ({m.ref_x}, {m.ref_y}) is out of bounds")
        key = (int(m.ref_y), int(m.ref_x))
        if key not in best or m.score > best[key].score:
            best[key] = m
    for (y, x), m in best.items():
        prior.c[y, x] = 1
        prior.u[y, x] = m.tgt_x - m.ref_x
        prior.v[y, x] = m.tgt_y - m.ref_y
        prior.phi[y, x] = m.score / top if top > 0 else 0.0
    return prior


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"raster dimensions differ: {sorted(shapes)}")


def _terms(w: FlowField, i1, i2, prior: MatchPrior, p: EnergyParams, with_grad=False):
    _check_shapes(w.u, i1, i2, prior.c)
    eps = p.psi_eps
    xs, ys = pixel_grid(i1.shape)
    x, y = xs + w.u, ys + w.v
    i1x, i1y = gradient(i1)
    i2x, i2y = gradient(i2)
    i2w, i2w_x, i2w_y = sample_with_derivatives(i2, x, y)
    gxw, gxw_x, gxw_y = sample_with_derivatives(i2x, x, y)
    gyw, gyw_x, gyw_y = sample_with_derivatives(i2y, x, y)
    r0 = i2w - i1
    rx, ry = gxw - i1x, gyw - i1y
    s0, s1 = r0 * r0, rx * rx + ry * ry
    ux, uy = gradient(w.u)
    vx, vy = gradient(w.v)
    ss = ux * ux + uy * uy + vx * vx + vy * vy
    du, dv = w.u - prior.u, w.v - prior.v
    sm = du * du + dv * dv
    cphi = prior.c * prior.phi
    e = (p.delta * psi(s0, eps) + p.gamma * psi(s1, eps) + p.alpha * psi(ss, eps)
         + p.beta * cphi * psi(sm, eps))
    if not with_grad:
        return e, None
    d0 = 2.0 * p.delta * psi_prime(s0, eps) * r0
    d1 = 2.0 * p.gamma * psi_prime(s1, eps)
    gs = 2.0 * p.alpha * psi_prime(ss, eps)
    gm = 2.0 * p.beta * cphi * psi_prime(sm, eps)
    gu = d0 * i2w_x + d1 * (rx * gxw_x + ry * gyw_x) + gradient_adjoint(gs * ux, gs * uy) + gm * du
    gv = d0 * i2w_y + d1 * (rx * gxw_y + ry * gyw_y) + gradient_adjoint(gs * vx, gs * vy) + gm * dv
    return e, (gu, gv)


def energy(w: FlowField, i1, i2, prior: MatchPrior | None = None, p: EnergyParams | None = None) -> float:
    """Discrete DeepFlow energy of the flow ``w`` mapping ``i1`` onto ``i2``."""
    p = p or EnergyParams()
    i1 = np.asarray(i1, dtype=np.float64)
    prior = prior if prior is not None else MatchPrior.empty(i1.shape)
    e, _ = _terms(w, i1, np.asarray(i2, dtype=np.float64), prior, p)
    return float(e.sum())


def energy_gradient(w: FlowField, i1, i2, prior: MatchPrior | None = None, p: EnergyParams | None = None):
    """Exact gradient ``(dE/du, dE/dv)`` of :func:`energy` (bilinear sampling
    differentiated piecewise)."""
    p = p or EnergyParams()
    i1 = np.asarray(i1, dtype=np.float64)
    prior = prior if prior is not None else MatchPrior.empty(i1.shape)
    _, g = _terms(w, i1, np.asarray(i2, dtype=np.float64), prior, p, with_grad=True)
    return g


@dataclass
class SolveInfo:
    """Per-level diagnostics of :func:`solve_flow` (coarsest first)."""

    shapes: list = field(default_factory=list)
    energies: list = field(default_factory=list)  # per level: energy before and after each accepted iteration
    stopped_early: list = field(default_factory=list)


def _edge_weights(g):
    return 0.5 * (g[:, :-1] + g[:, 1:]), 0.5 * (g[:-1, :] + g[1:, :])


def _neighbour_diff(f, wx, wy):
    """``sum_n w_pn (f_p - f_n)`` over the 4-neighbourhood."""
    out = np.zeros_like(f)
    dx = wx * (f[:, :-1] - f[:, 1:])
    out[:, :-1] += dx
    out[:, 1:] -= dx
    dy = wy * (f[:-1, :] - f[1:, :])
    out[:-1, :] += dy
    out[1:, :] -= dy
    return out


def _derivatives(img):
    ix, iy = gradient(img)
    ixx, ixy = gradient(ix)
    iyx, iyy = gradient(iy)
    return ix, iy, ixx, 0.5 * (ixy + iyx), iyy


def _solve_level(i1, i2, w: FlowField, prior: MatchPrior, p: EnergyParams, level: int, info: SolveInfo):
    eps = p.psi_eps
    xs, ys = pixel_grid(i1.shape)
    d1 = _derivatives(i1)
    d2 = _derivatives(i2)
    u, v = w.u.copy(), w.v.copy()
    cphi = p.beta * prior.c * prior.phi
    e_cur = energy(FlowField(u, v), i1, i2, prior, p)
    trace = [e_cur]
    best = (e_cur, u, v)
    stopped = False
    for it in range(p.outer_iters):
        x, y = xs + u, ys + v
        i2w = sample(i2, x, y)
        wd = [sample(d, x, y) for d in d2]
        iz = i2w - i1
        ixz, iyz = wd[0] - d1[0], wd[1] - d1[1]
        ix, iy, ixx, ixy, iyy = (0.5 * (a + b) for a, b in zip(wd, d1))

        a0 = p.delta * psi_prime(iz * iz, eps)
        a1 = p.gamma * psi_prime(ixz * ixz + iyz * iyz, eps)
        ux, uy = gradient(u)
        vx, vy = gradient(v)
        g = p.alpha * psi_prime(ux * ux + uy * uy + vx * vx + vy * vy, eps)
        wx, wy = _edge_weights(g)
        mu, mv = u - prior.u, v - prior.v
        m = cphi * psi_prime(mu * mu + mv * mv, eps)

        a11 = a0 * ix * ix + a1 * (ixx * ixx + ixy * ixy) + m
        a12 = a0 * ix * iy + a1 * (ixx * ixy + ixy * iyy)
        a22 = a0 * iy * iy + a1 * (ixy * ixy + iyy * iyy) + m
        # The right-hand side is the exact energy gradient, so fixed points of the
        # iteration are stationary points of the discrete energy; the matrix
        # only steers the step.
        gu, gv = energy_gradient(FlowField(u, v), i1, i2, prior, p)
        b1, b2 = -0.5 * gu, -0.5 * gv

        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        kernels.solve(du, dv, a11, a12, a22, b1, b2, np.ascontiguousarray(wx),
                      np.ascontiguousarray(wy), p.solver_iters, p.sor_omega,
                      multigrid=p.multigrid)
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dv))):
            raise NumericalError(f"non-finite flow increment at level {level}, iteration {it}")
        nu, nv = u + du, v + dv
        e_new = energy(FlowField(nu, nv), i1, i2, prior, p)
        if not np.isfinite(e_new):
            raise NumericalError(f"non-finite energy at level {level}, iteration {it}")
        trace.append(e_new)
        if e_new > DIVERGENCE_RATIO * e_cur:
            log.debug("level %d: energy rose %.6g -> %.6g at iteration %d; stopping", level, e_cur, e_new, it)
            stopped = True
            break
        u, v, e_cur = nu, nv, e_new
        if e_cur < best[0]:
            best = (e_cur, u, v)
    # the lowest-energy iterate guarantees the level never ends above its start
    _, u, v = best
    info.shapes.append(i1.shape)
    info.energies.append(trace)
    info.stopped_early.append(stopped)
    return FlowField(u, v)


def solve_flow(i1, i2, prior: MatchPrior | None = None, params: EnergyParams | None = None,
               scale_factor: float = 0.5, min_dimension: int = 16, init: FlowField | None = None,
               return_info: bool = False):
    """Dense flow ``w`` such that ``i2(x + w(x)) ~ i1(x)``.

    Coarse-to-fine over Gaussian pyramids of both images; the prior is
    downsampled onto every level. ``init`` optionally seeds the coarsest
    level (rescaled).
    """
    p = params or EnergyParams()
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise DimensionError(f"images differ in size: {i1.shape} vs {i2.shape}")
    prior = prior if prior is not None else MatchPrior.empty(i1.shape)
    if prior.shape != i1.shape:
        raise DimensionError(f"prior {prior.shape} does not match images {i1.shape}")
    pyr1 = build_pyramid(i1, scale_factor, min_dimension)
    pyr2 = build_pyramid(i2, scale_factor, min_dimension)
    info = SolveInfo()
    w = None
    for lvl in range(len(pyr1) - 1, -1, -1):
        shape = pyr1[lvl].shape
        if w is None:
            w = upsample_flow(init, shape) if init is not None else FlowField.zeros(shape)
        else:
            w = upsample_flow(w, shape)
        rx, ry = pyr1.ratios[lvl]
        lp = prior if lvl == 0 else prior.downsample(rx, ry, shape)
        w = _solve_level(pyr1[lvl], pyr2[lvl], w, lp, p, lvl, info)
    return (w, info) if return_info else w


def write_flo(path, flow: FlowField) -> None:
    """Middlebury ``.flo``: float32 tag 202021.25, int32 width, int32 height,
    then interleaved little-endian float32 ``(u, v)`` rows."""
    h, w = flow.shape
    with open(path, "wb") as fh:
        np.array([202021.25], dtype="<f4").tofile(fh)
        np.array([w, h], dtype="<i4").tofile(fh)
        np.stack([flow.u, flow.v], axis=-1).astype("<f4").tofile(fh)


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        tag = np.fromfile(fh, dtype="<f4", count=1)
        if tag.size != 1 or tag[0] != np.float32(202021.25):
            raise ValueError(f"{path}: not a .flo file")
        w, h = (int(n) for n in np.fromfile(fh, dtype="<i4", count=2))
        data = np.fromfile(fh, dtype="<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise ValueError(f"{path}: truncated flow data")
    data = data.reshape(h, w, 2).astype(np.float64)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())
