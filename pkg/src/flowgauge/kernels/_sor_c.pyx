# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Red-black SOR for the per-pixel 2x2 coupled flow system (compiled)."""
import numpy as np


def sor_solve(double[:, ::1] du, double[:, ::1] dv,
              const double[:, ::1] a11, const double[:, ::1] a12, const double[:, ::1] a22,
              const double[:, ::1] b1, const double[:, ::1] b2,
              const double[:, ::1] wx, const double[:, ::1] wy,
              int iterations, double omega):
    cdef Py_ssize_t h = du.shape[0], w = du.shape[1]
    cdef Py_ssize_t x, y, it, colour
    cdef double wl, wr, wu, wd, ws, nb, new
    with nogil:
        for it in range(iterations):
            for colour in range(2):
                for y in range(h):
                    for x in range((y + colour) % 2, w, 2):
                        wl = wx[y, x - 1] if x > 0 else 0.0
                        wr = wx[y, x] if x < w - 1 else 0.0
                        wu = wy[y - 1, x] if y > 0 else 0.0
                        wd = wy[y, x] if y < h - 1 else 0.0
                        ws = ((wl + wr) + wu) + wd

                        nb = ((wl * (du[y, x - 1] if x > 0 else 0.0)
                               + wr * (du[y, x + 1] if x < w - 1 else 0.0))
                              + (wu * (du[y - 1, x] if y > 0 else 0.0)
                                 + wd * (du[y + 1, x] if y < h - 1 else 0.0)))
                        new = (b1[y, x] + nb - a12[y, x] * dv[y, x]) / (a11[y, x] + ws)
                        du[y, x] = (1.0 - omega) * du[y, x] + omega * new

                        nb = ((wl * (dv[y, x - 1] if x > 0 else 0.0)
                               + wr * (dv[y, x + 1] if x < w - 1 else 0.0))
                              + (wu * (dv[y - 1, x] if y > 0 else 0.0)
                                 + wd * (dv[y + 1, x] if y < h - 1 else 0.0)))
                        new = (b2[y, x] + nb - a12[y, x] * du[y, x]) / (a22[y, x] + ws)
                        dv[y, x] = (1.0 - omega) * dv[y, x] + omega * new
    return np.asarray(du), np.asarray(dv)
