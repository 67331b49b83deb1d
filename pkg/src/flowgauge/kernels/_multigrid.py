"""Aggregation multigrid around the SOR smoother.

Coarsening merges 2x2 pixel blocks (piecewise-constant prolongation, Galerkin
coarse operator). Summing the per-pixel 2x2 blocks and the edge weights that
cross between aggregates gives a coarse system with exactly the same
structure, so the same SOR kernel smooths every grid. Residuals, restriction
and prolongation use sparse matrices built once per hierarchy.
"""
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

COARSEST_PIXELS = 256


def coarsen_operator(a11, a12, a22, wx, wy):
    """Galerkin coarse operator of the 2x2 aggregation, in structured form."""
    h, w = a11.shape
    hc, wc = (h + 1) // 2, (w + 1) // 2

    def restrict(f):
        p = np.pad(f, ((0, h % 2), (0, w % 2)))
        return p.reshape(hc, 2, wc, 2).sum(axis=(1, 3))

    # fine x-edges (2X+1 -> 2X+2) connect aggregate X to X+1
    cx = wx[:, 1::2][:, :wc - 1]
    cx = np.pad(cx, ((0, h % 2), (0, 0))).reshape(hc, 2, wc - 1).sum(axis=1)
    cy = wy[1::2, :][:hc - 1, :]
    cy = np.pad(cy, ((0, 0), (0, w % 2))).reshape(hc - 1, wc, 2).sum(axis=2)
    return (restrict(a11), restrict(a12), restrict(a22),
            np.ascontiguousarray(cx), np.ascontiguousarray(cy))


def assemble(a11, a12, a22, wx, wy):
    """Sparse matrix of the coupled system, unknowns ordered ``[du, dv]``."""
    h, w = a11.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    rows, cols, vals = [idx, idx + n, idx, idx + n], [idx, idx + n, idx + n, idx], [a11, a22, a12, a12]
    for p, q, wt in ((idx[:, :-1], idx[:, 1:], wx), (idx[:-1, :], idx[1:, :], wy)):
        for off in (0, n):
            rows += [p + off, q + off, p + off, q + off]
            cols += [p + off, q + off, q + off, p + off]
            vals += [wt, wt, -wt, -wt]
    return sp.csr_matrix((np.concatenate([v.ravel() for v in vals]),
                          (np.concatenate([r.ravel() for r in rows]),
                           np.concatenate([c.ravel() for c in cols]))), shape=(2 * n, 2 * n))


def aggregation(shape):
    """Sparse piecewise-constant prolongation for both flow components."""
    h, w = shape
    hc, wc = (h + 1) // 2, (w + 1) // 2
    ys, xs = np.mgrid[0:h, 0:w]
    agg = ((ys // 2) * wc + xs // 2).ravel()
    n, nc = h * w, hc * wc
    rows = np.concatenate([np.arange(n), np.arange(n) + n])
    cols = np.concatenate([agg, agg + nc])
    return sp.csr_matrix((np.ones(2 * n), (rows, cols)), shape=(2 * n, 2 * nc))


def _factorize(A):
    n = A.shape[0]
    # a tiny diagonal shift keeps pure-smoothness systems (no data) nonsingular
    return spla.splu((A + 1e-12 * sp.identity(n, format="csr")).tocsc())


def direct_solve(a11, a12, a22, b1, b2, wx, wy):
    """Sparse direct solve of the whole system."""
    n = a11.size
    x = _factorize(assemble(a11, a12, a22, wx, wy)).solve(np.concatenate([b1.ravel(), b2.ravel()]))
    return x[:n].reshape(a11.shape), x[n:].reshape(a11.shape)


class Hierarchy:
    """Structured operators, sparse matrices and transfers of every grid."""

    def __init__(self, a11, a12, a22, wx, wy):
        self.ops = [(a11, a12, a22, wx, wy)]
        while self.ops[-1][0].size > COARSEST_PIXELS and min(self.ops[-1][0].shape) > 1:
            self.ops.append(coarsen_operator(*self.ops[-1]))
        self.matrices = [assemble(*ops) for ops in self.ops]
        self.transfers = [aggregation(ops[0].shape) for ops in self.ops[:-1]]
        self.coarse = _factorize(self.matrices[-1])


def vcycle(sor, hier, level, b, nu, omega):
    """One V-cycle for ``A x = b`` from a zero initial guess; returns ``x``."""
    if level == len(hier.ops) - 1:
        return hier.coarse.solve(b)
    a11, a12, a22, wx, wy = hier.ops[level]
    shape = a11.shape
    n = a11.size
    b1 = np.ascontiguousarray(b[:n].reshape(shape))
    b2 = np.ascontiguousarray(b[n:].reshape(shape))
    du, dv = np.zeros(shape), np.zeros(shape)
    sor(du, dv, a11, a12, a22, b1, b2, wx, wy, nu, omega)
    x = np.concatenate([du.ravel(), dv.ravel()])
    P = hier.transfers[level]
    x += P @ vcycle(sor, hier, level + 1, P.T @ (b - hier.matrices[level] @ x), nu, omega)
    du[...] = x[:n].reshape(shape)
    dv[...] = x[n:].reshape(shape)
    sor(du, dv, a11, a12, a22, b1, b2, wx, wy, nu, omega)
    return np.concatenate([du.ravel(), dv.ravel()])


def multigrid_solve(sor, du, dv, a11, a12, a22, b1, b2, wx, wy, iters, omega, nu=1):
    """Conjugate gradients preconditioned by one V-cycle per iteration.

    Piecewise-constant aggregation on its own under-corrects smooth error;
    wrapping the cycle in CG recovers fast convergence. ``du`` and ``dv``
    hold the initial guess and receive the solution.
    """
    h, w = a11.shape
    n = h * w
    hier = Hierarchy(a11, a12, a22, wx, wy)
    smooth_omega = min(omega, 1.0)
    M = spla.LinearOperator(hier.matrices[0].shape, dtype=np.float64,
                            matvec=lambda r: vcycle(sor, hier, 0, np.asarray(r, dtype=np.float64).ravel(),
                                                    nu, smooth_omega))
    b = np.concatenate([b1.ravel(), b2.ravel()])
    x0 = np.concatenate([du.ravel(), dv.ravel()])
    x, _ = spla.cg(hier.matrices[0], b, x0=x0, M=M, maxiter=max(1, int(iters)), rtol=1e-8)
    du[...] = x[:n].reshape(h, w)
    dv[...] = x[n:].reshape(h, w)
    return du, dv
