import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg.grid import (
    StationaryConstraint,
    TimeDependentConstraint,
    TimeGrid,
    TorusGrid,
    cone_violation,
    divergence,
    divergence_adjoint,
    divergence_matrix,
    laplacian,
    laplacian_matrix,
    mass,
    operator_norm,
    project_cone,
)
from oracles import dense_matrix, loop_divergence, loop_laplacian


def test_grid_basic_properties():
    g = TorusGrid(dim=2, n=8)
    assert g.h == pytest.approx(0.125)
    assert g.shape == (8, 8)
    assert g.n_cells == 64
    assert g.n_flux == 4
    assert g.cell_volume == pytest.approx(0.125**2)
    g1 = TorusGrid(dim=1, n=5)
    assert g1.shape == (5,)
    assert g1.n_flux == 2


def test_grid_points_are_cell_corners():
    g = TorusGrid(dim=1, n=4)
    assert np.allclose(g.points().ravel(), [0.0, 0.25, 0.5, 0.75])
    g2 = TorusGrid(dim=2, n=2)
    pts = g2.points()
    assert pts.shape == (4, 2)
    assert np.allclose(pts, [[0, 0], [0, 0.5], [0.5, 0], [0.5, 0.5]])


def test_grid_rejects_bad_dims():
    with pytest.raises(ValueError):
        TorusGrid(dim=3, n=4)
    with pytest.raises(ValueError):
        TorusGrid(dim=1, n=1)


@pytest.mark.parametrize("dim,n", [(1, 9), (1, 16), (2, 7), (2, 12)])
def test_laplacian_matches_loop_reference(dim, n, rng):
    g = TorusGrid(dim=dim, n=n)
    u = rng.normal(size=g.shape)
    fast = laplacian(u, g)
    slow = loop_laplacian(u, n, dim, g.h)
    assert np.max(np.abs(fast - slow)) <= 1e-10 * max(1.0, np.max(np.abs(slow)))


def test_laplacian_annihilates_constants():
    g = TorusGrid(dim=2, n=6)
    # not exactly zero: the neighbor sum rounds before the subtraction
    assert np.max(np.abs(laplacian(np.full(g.shape, 3.7), g))) <= 1e-11


def test_laplacian_sine_eigenfunction():
    # discrete symbol of sin(2 pi x): -(2/h^2)(1 - cos(2 pi h))
    n = 64
    g = TorusGrid(dim=1, n=n)
    x = g.coordinates()[0]
    u = np.sin(2 * np.pi * x)
    lam = -(2.0 / g.h**2) * (1.0 - np.cos(2 * np.pi * g.h))
    assert lam == pytest.approx(-39.44671910136276, abs=1e-10)
    assert np.max(np.abs(laplacian(u, g) - lam * u)) <= 1e-10


def test_laplacian_delta_stencil():
    g = TorusGrid(dim=2, n=4)
    e = np.zeros(g.shape)
    e[0, 0] = 1.0
    out = laplacian(e, g) * g.h**2
    expect = np.zeros((4, 4))
    expect[0, 0] = -4.0
    expect[1, 0] = expect[3, 0] = expect[0, 1] = expect[0, 3] = 1.0
    assert np.allclose(out, expect)


@pytest.mark.parametrize("dim,n", [(1, 8), (2, 6)])
def test_divergence_matches_loop_reference(dim, n, rng):
    g = TorusGrid(dim=dim, n=n)
    w = rng.normal(size=(g.n_flux,) + g.shape)
    fast = divergence(w, g)
    slow = loop_divergence(w, n, dim, g.h)
    assert np.max(np.abs(fast - slow)) <= 1e-12 * max(1.0, np.max(np.abs(slow)))


@pytest.mark.parametrize("dim,n", [(1, 8), (2, 5)])
def test_divergence_sums_to_zero(dim, n, rng):
    # one-sided differences telescope over the torus
    g = TorusGrid(dim=dim, n=n)
    w = rng.normal(size=(g.n_flux,) + g.shape)
    assert abs(np.sum(divergence(w, g))) <= 1e-12


@pytest.mark.parametrize("dim,n", [(1, 8), (2, 5)])
def test_divergence_adjoint_identity(dim, n, rng):
    g = TorusGrid(dim=dim, n=n)
    for _ in range(20):
        w = rng.normal(size=(g.n_flux,) + g.shape)
        s = rng.normal(size=g.shape)
        lhs = np.sum(divergence(w, g) * s)
        rhs = np.sum(w * divergence_adjoint(s, g))
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


@pytest.mark.parametrize("dim,n", [(1, 6), (2, 4)])
def test_sparse_builders_match_apply(dim, n, rng):
    g = TorusGrid(dim=dim, n=n)
    L = laplacian_matrix(g).toarray()
    L_ref = dense_matrix(
        lambda x: laplacian(x.reshape(g.shape), g).ravel(), g.n_cells, g.n_cells
    )
    assert np.max(np.abs(L - L_ref)) <= 1e-12 * np.max(np.abs(L_ref))

    B = divergence_matrix(g).toarray()
    B_ref = dense_matrix(
        lambda x: divergence(x.reshape((g.n_flux,) + g.shape), g).ravel(),
        g.n_flux * g.n_cells,
        g.n_cells,
    )
    assert np.max(np.abs(B - B_ref)) <= 1e-12 * np.max(np.abs(B_ref))


def test_laplacian_matrix_symmetric():
    g = TorusGrid(dim=2, n=5)
    L = laplacian_matrix(g).toarray()
    assert np.max(np.abs(L - L.T)) == 0.0


def test_project_cone_signs(rng):
    w = rng.normal(size=(4, 3, 3))
    p = project_cone(w)
    assert np.all(p[0::2] >= 0)
    assert np.all(p[1::2] <= 0)
    assert cone_violation(p) == 0.0
    # projection is the identity on the cone
    assert np.allclose(project_cone(p), p)
    # violation reports the worst offending component
    assert cone_violation(np.array([[-1.0], [0.5]])) == pytest.approx(1.0)


def test_mass_uniform():
    g = TorusGrid(dim=2, n=10)
    assert mass(np.ones(g.shape), g) == pytest.approx(1.0)
    g1 = TorusGrid(dim=1, n=7)
    assert mass(np.full(g1.shape, 2.0), g1) == pytest.approx(2.0)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=9),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_divergence_adjoint_property(n, seed):
    g = TorusGrid(dim=1, n=n)
    r = np.random.default_rng(seed)
    w = r.normal(size=(2, n))
    s = r.normal(size=(n,))
    lhs = np.sum(divergence(w, g) * s)
    rhs = np.sum(w * divergence_adjoint(s, g))
    assert abs(lhs - rhs) <= 1e-11 * (1 + abs(lhs))


@pytest.mark.parametrize("nu", [0.0, 0.2])
@pytest.mark.parametrize("dim,n", [(1, 7), (2, 5)])
def test_stationary_constraint_matches_sparse(dim, n, nu, rng):
    g = TorusGrid(dim=dim, n=n)
    op = StationaryConstraint(grid=g, nu=nu)
    m = rng.normal(size=g.shape)
    w = rng.normal(size=(g.n_flux,) + g.shape)
    cont, tot = op.apply(m, w)
    y = np.concatenate([m.ravel(), w.ravel()])
    out = op.sparse() @ y
    assert np.max(np.abs(out[: g.n_cells] - cont.ravel())) <= 1e-12
    assert abs(out[g.n_cells] - tot) <= 1e-12


@pytest.mark.parametrize("nu", [0.0, 0.15])
@pytest.mark.parametrize("dim,n", [(1, 7), (2, 4)])
def test_stationary_adjoint_identity(dim, n, nu, rng):
    g = TorusGrid(dim=dim, n=n)
    op = StationaryConstraint(grid=g, nu=nu)
    for _ in range(20):
        m = rng.normal(size=g.shape)
        w = rng.normal(size=(g.n_flux,) + g.shape)
        sc = rng.normal(size=g.shape)
        sm = rng.normal()
        cont, tot = op.apply(m, w)
        lhs = np.sum(cont * sc) + tot * sm
        m_part, w_part = op.apply_adjoint(sc, sm)
        rhs = np.sum(m * m_part) + np.sum(w * w_part)
        assert abs(lhs - rhs) <= 1e-11 * (1 + abs(lhs))


def test_stationary_residual_at_uniform():
    g = TorusGrid(dim=2, n=6)
    op = StationaryConstraint(grid=g, nu=0.3)
    m = np.ones(g.shape)
    w = np.zeros((g.n_flux,) + g.shape)
    assert op.residual(m, w) <= 1e-14


@pytest.mark.parametrize("nu", [0.0, 0.1])
def test_time_dependent_constraint_matches_sparse(nu, rng):
    g = TorusGrid(dim=1, n=6)
    tg = TimeGrid(horizon=1.0, n_steps=4)
    op = TimeDependentConstraint(grid=g, time_grid=tg, nu=nu)
    m = rng.normal(size=(tg.n_steps + 1,) + g.shape)
    w = rng.normal(size=(tg.n_steps, g.n_flux) + g.shape)
    cont, pin = op.apply(m, w)
    y = np.concatenate([m.ravel(), w.ravel()])
    out = op.sparse() @ y
    n_cont = tg.n_steps * g.n_cells
    assert np.max(np.abs(out[:n_cont] - cont.ravel())) <= 1e-12
    assert np.max(np.abs(out[n_cont:] - pin.ravel())) <= 1e-12


@pytest.mark.parametrize("nu", [0.0, 0.1])
@pytest.mark.parametrize("dim", [1, 2])
def test_time_dependent_adjoint_identity(nu, dim, rng):
    g = TorusGrid(dim=dim, n=5)
    tg = TimeGrid(horizon=0.8, n_steps=3)
    op = TimeDependentConstraint(grid=g, time_grid=tg, nu=nu)
    for _ in range(20):
        m = rng.normal(size=(tg.n_steps + 1,) + g.shape)
        w = rng.normal(size=(tg.n_steps, g.n_flux) + g.shape)
        sc = rng.normal(size=(tg.n_steps,) + g.shape)
        sp = rng.normal(size=g.shape)
        cont, pin = op.apply(m, w)
        lhs = np.sum(cont * sc) + np.sum(pin * sp)
        m_part, w_part = op.apply_adjoint(sc, sp)
        rhs = np.sum(m * m_part) + np.sum(w * w_part)
        assert abs(lhs - rhs) <= 1e-11 * (1 + abs(lhs))


def test_time_dependent_mass_telescopes(rng):
    # if every continuity row vanishes, each slab keeps the initial mass
    g = TorusGrid(dim=1, n=8)
    tg = TimeGrid(horizon=1.0, n_steps=5)
    op = TimeDependentConstraint(grid=g, time_grid=tg, nu=0.07)
    m = rng.normal(size=(tg.n_steps + 1,) + g.shape)
    w = rng.normal(size=(tg.n_steps, g.n_flux) + g.shape)
    cont, _ = op.apply(m, w)
    # per-slab cell sums of the continuity residual equal the mass drift
    for k in range(tg.n_steps):
        drift = (np.sum(m[k + 1]) - np.sum(m[k])) / tg.dt
        assert np.sum(cont[k]) == pytest.approx(drift, abs=1e-9)


def test_time_dependent_rhs_pins_initial_density():
    g = TorusGrid(dim=1, n=6)
    tg = TimeGrid(horizon=1.0, n_steps=3)
    m0 = np.linspace(0.5, 1.5, 6)
    m0 = m0 / (np.sum(m0) * g.cell_volume)
    op = TimeDependentConstraint(grid=g, time_grid=tg, nu=0.0, m0=m0)
    zeros, pin_rhs = op.rhs()
    assert np.allclose(pin_rhs, m0)
    assert np.max(np.abs(zeros)) == 0.0


@pytest.mark.parametrize("dim,n,nu", [(1, 6, 0.0), (1, 5, 0.2), (2, 4, 0.1)])
def test_operator_norm_close_to_dense(dim, n, nu):
    g = TorusGrid(dim=dim, n=n)
    op = StationaryConstraint(grid=g, nu=nu)
    est = operator_norm(op)
    exact = np.linalg.svd(op.sparse().toarray(), compute_uv=False)[0]
    assert est == pytest.approx(exact, rel=0.05)
    assert est <= exact * (1 + 1e-9)
