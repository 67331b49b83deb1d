"""Red-black SOR for the per-pixel 2x2 coupled flow system (numpy)."""
import numpy as np


def _neighbour_weights(wx, wy, shape):
    h, w = shape
    wl = np.zeros(shape)
    wr = np.zeros(shape)
    wu = np.zeros(shape)
    wd = np.zeros(shape)
    wl[:, 1:] = wx
    wr[:, :w - 1] = wx
    wu[1:, :] = wy
    wd[:h - 1, :] = wy
    return wl, wr, wu, wd


def _neighbour_sum(f, wl, wr, wu, wd):
    p = np.pad(f, 1)
    return (wl * p[1:-1, :-2] + wr * p[1:-1, 2:]) + (wu * p[:-2, 1:-1] + wd * p[2:, 1:-1])


def sor_solve(du, dv, a11, a12, a22, b1, b2, wx, wy, iterations, omega):
    """Solve in place, pixel ``p`` with neighbours ``n`` and edge weights ``w``::

        (a11 + sum w) du_p - sum w du_n + a12 dv_p = b1
        (a22 + sum w) dv_p - sum w dv_n + a12 du_p = b2

    ``wx[y, x]`` couples ``(x, y)`` and ``(x + 1, y)``; ``wy[y, x]`` couples
    ``(x, y)`` and ``(x, y + 1)``. Red pixels (even ``x + y``) are swept
    first, then black; within a pixel ``du`` is updated before ``dv``.
    """
    shape = du.shape
    wl, wr, wu, wd = _neighbour_weights(wx, wy, shape)
    ws = ((wl + wr) + wu) + wd
    d1 = a11 + ws
    d2 = a22 + ws
    yy, xx = np.indices(shape)
    colours = [((xx + yy) % 2) == c for c in (0, 1)]
    for _ in range(iterations):
        for mask in colours:
            nb = _neighbour_sum(du, wl, wr, wu, wd)
            new = (b1 + nb - a12 * dv) / d1
            du[mask] = (1.0 - omega) * du[mask] + omega * new[mask]
            nb = _neighbour_sum(dv, wl, wr, wu, wd)
            new = (b2 + nb - a12 * du) / d2
            dv[mask] = (1.0 - omega) * dv[mask] + omega * new[mask]
    return du, dv


def residual(du, dv, a11, a12, a22, b1, b2, wx, wy):
    wl, wr, wu, wd = _neighbour_weights(wx, wy, du.shape)
    ws = wl + wr + wu + wd
    r1 = b1 - ((a11 + ws) * du - _neighbour_sum(du, wl, wr, wu, wd) + a12 * dv)
    r2 = b2 - ((a22 + ws) * dv - _neighbour_sum(dv, wl, wr, wu, wd) + a12 * du)
    return r1, r2
