import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowgauge import kernels
from flowgauge.kernels import _multigrid


def random_system(shape, seed, data_scale=1.0):
    """A random instance of the coupled flow system: PSD 2x2 pixel blocks plus
    positive neighbour weights, which is always symmetric positive definite."""
    rng = np.random.default_rng(seed)
    h, w = shape
    gx, gy = rng.normal(size=shape), rng.normal(size=shape)
    m = rng.random(shape) * 0.1
    a11 = data_scale * gx * gx + m
    a12 = data_scale * gx * gy
    a22 = data_scale * gy * gy + m
    wx = rng.uniform(0.1, 2.0, (h, w - 1))
    wy = rng.uniform(0.1, 2.0, (h - 1, w))
    b1, b2 = rng.normal(size=shape), rng.normal(size=shape)
    return a11, a12, a22, b1, b2, wx, wy


def energy_norm_error(du, dv, sys_, exact):
    a11, a12, a22, _, _, wx, wy = sys_
    e = np.concatenate([(du - exact[0]).ravel(), (dv - exact[1]).ravel()])
    return float(np.sqrt(e @ (_multigrid.assemble(a11, a12, a22, wx, wy) @ e)))


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")
@settings(max_examples=25, deadline=None)
@given(st.integers(3, 17), st.integers(3, 17), st.integers(0, 10_000), st.integers(1, 6),
       st.floats(0.5, 1.9))
def test_cython_matches_python(h, w, seed, sweeps, omega):
    a11, a12, a22, b1, b2, wx, wy = random_system((h, w), seed)
    out = []
    for impl in (kernels.python, kernels.compiled):
        du = np.random.default_rng(seed + 1).normal(size=(h, w))
        dv = np.zeros((h, w))
        impl.sor_solve(du, dv, a11, a12, a22, b1, b2, wx, wy, sweeps, omega)
        out.append((du, dv))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-12, atol=1e-12)


def test_residual_of_exact_solution_vanishes():
    sys_ = random_system((9, 7), 3)
    a11, a12, a22, b1, b2, wx, wy = sys_
    du, dv = _multigrid.direct_solve(*sys_)
    r1, r2 = kernels.residual(du, dv, a11, a12, a22, b1, b2, wx, wy)
    assert max(np.abs(r1).max(), np.abs(r2).max()) < 1e-9


def test_assembled_matrix_matches_residual():
    a11, a12, a22, b1, b2, wx, wy = random_system((5, 6), 4)
    rng = np.random.default_rng(0)
    du, dv = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    A = _multigrid.assemble(a11, a12, a22, wx, wy)
    r1, r2 = kernels.residual(du, dv, a11, a12, a22, b1, b2, wx, wy)
    ax = A @ np.concatenate([du.ravel(), dv.ravel()])
    np.testing.assert_allclose(np.concatenate([b1.ravel(), b2.ravel()]) - ax,
                               np.concatenate([r1.ravel(), r2.ravel()]), atol=1e-12)
    assert abs(A - A.T).max() < 1e-14


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.8, 1.9))
def test_sor_error_energy_norm_non_increasing(seed, omega):
    sys_ = random_system((8, 9), seed)
    exact = _multigrid.direct_solve(*sys_)
    a11, a12, a22, b1, b2, wx, wy = sys_
    du, dv = np.zeros((8, 9)), np.zeros((8, 9))
    prev = energy_norm_error(du, dv, sys_, exact)
    for _ in range(15):
        kernels.solve(du, dv, a11, a12, a22, b1, b2, wx, wy, 1, omega, multigrid=False)
        cur = energy_norm_error(du, dv, sys_, exact)
        assert cur <= prev * (1 + 1e-12) + 1e-12
        prev = cur


@pytest.mark.parametrize("shape, data_scale", [((40, 37), 1.0), ((64, 64), 1e-3), ((20, 90), 0.0)])
def test_multigrid_agrees_with_direct_solve(shape, data_scale):
    sys_ = random_system(shape, 5, data_scale)
    a11, a12, a22, b1, b2, wx, wy = sys_
    exact = _multigrid.direct_solve(*sys_)
    du, dv = np.zeros(shape), np.zeros(shape)
    kernels.solve(du, dv, a11, a12, a22, b1, b2, wx, wy, 60, 1.6)
    scale = max(np.abs(exact[0]).max(), np.abs(exact[1]).max())
    assert np.abs(du - exact[0]).max() < 1e-5 * scale
    assert np.abs(dv - exact[1]).max() < 1e-5 * scale


def test_multigrid_beats_plain_sor_on_smooth_systems():
    # smoothness-dominated systems are where plain SOR stalls
    sys_ = random_system((64, 64), 6, data_scale=1e-3)
    a11, a12, a22, b1, b2, wx, wy = sys_
    exact = _multigrid.direct_solve(*sys_)
    errs = {}
    for mg in (False, True):
        du, dv = np.zeros((64, 64)), np.zeros((64, 64))
        kernels.solve(du, dv, a11, a12, a22, b1, b2, wx, wy, 30, 1.6, multigrid=mg)
        errs[mg] = energy_norm_error(du, dv, sys_, exact)
    assert errs[True] < 1e-3 * errs[False]


def test_aggregation_rows_are_partitions():
    P = _multigrid.aggregation((5, 7))
    assert P.shape == (2 * 35, 2 * 3 * 4)
    np.testing.assert_array_equal(np.asarray(P.sum(axis=1)).ravel(), 1.0)


def test_coarse_operator_is_galerkin():
    a11, a12, a22, _, _, wx, wy = random_system((6, 8), 7)
    A = _multigrid.assemble(a11, a12, a22, wx, wy)
    P = _multigrid.aggregation((6, 8))
    Ac = _multigrid.assemble(*_multigrid.coarsen_operator(a11, a12, a22, wx, wy))
    np.testing.assert_allclose((P.T @ A @ P).toarray(), Ac.toarray(), atol=1e-12)
