import numpy as np
import pytest

from mfg.gp import AnchorSet, GPRepresenter, KernelSpec, gram
from oracles import central_diff


def test_matern_known_value():
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=1.0)
    val = k.pairwise(np.array([[0.0]]), np.array([[1.0]]))[0, 0]
    assert val == pytest.approx(0.5239941088318203, abs=1e-12)
    assert k.pairwise(np.array([[0.3]]), np.array([[0.3]]))[0, 0] == pytest.approx(1.0)


def test_matern_scaling():
    k = KernelSpec(kind="matern52", sigma2=2.5, rho=1.0)
    val = k.pairwise(np.array([[0.0]]), np.array([[1.0]]))[0, 0]
    assert val == pytest.approx(2.5 * 0.5239941088318203, rel=1e-12)


def test_periodic_known_value_and_periodicity():
    k = KernelSpec(kind="periodic", sigma2=1.0, rho=1.0)
    val = k.pairwise(np.array([[0.0]]), np.array([[0.25]]))[0, 0]
    assert val == pytest.approx(0.3678794411714424, abs=1e-12)
    # exact on the unit torus
    x = np.array([[0.13], [0.77]])
    shifted = x + 1.0
    assert np.allclose(k.pairwise(x, x), k.pairwise(x, shifted), atol=1e-15)


def test_periodic_2d_periodicity(rng):
    k = KernelSpec(kind="periodic", sigma2=0.7, rho=0.4)
    x = rng.uniform(0, 1, (5, 2))
    y = rng.uniform(0, 1, (6, 2))
    shift = y + np.array([2.0, -1.0])
    assert np.allclose(k.pairwise(x, y), k.pairwise(x, shift), atol=1e-14)


def test_kernel_matrices_are_psd(rng):
    for kind in ("matern52", "periodic"):
        k = KernelSpec(kind=kind, sigma2=1.3, rho=0.5)
        x = rng.uniform(0, 1, (30, 2))
        kk = k.pairwise(x, x)
        assert np.allclose(kk, kk.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(kk)) >= -1e-9


def test_matern_d1_matches_fd():
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.7, smoothing=1e-6)
    anchors = np.array([[0.2], [0.9], [1.7]])
    for x0 in (0.05, 0.55, 1.3):
        d1 = k.pairwise_d1(np.array([[x0]]), anchors)[0]
        fd = np.array([
            central_diff(lambda t: k.pairwise(t[None, :], anchors[j : j + 1])[0, 0],
                         np.array([x0]), eps=1e-6)[0]
            for j in range(3)
        ])
        assert np.max(np.abs(d1 - fd)) <= 1e-6 * (1 + np.max(np.abs(fd)))


def test_matern_d2_matches_fd():
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.7, smoothing=1e-6)
    anchors = np.array([[0.2], [0.9], [1.7]])
    for x0 in (0.05, 0.55, 1.3):
        d2 = k.pairwise_d2(np.array([[x0]]), anchors)[0]
        fd = np.array([
            central_diff(lambda t: k.pairwise_d1(t[None, :], anchors[j : j + 1])[0, 0],
                         np.array([x0]), eps=1e-5)[0]
            for j in range(3)
        ])
        assert np.max(np.abs(d2 - fd)) <= 1e-4 * (1 + np.max(np.abs(fd)))


def test_derivatives_require_smoothing():
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=1.0)
    with pytest.raises(ValueError):
        k.pairwise_d1(np.array([[0.1]]), np.array([[0.5]]))


def test_anchor_duplicates_rejected():
    with pytest.raises(ValueError, match="[Dd]uplicate|distinct"):
        AnchorSet(np.array([[0.1], [0.4], [0.1]]))


def test_anchor_set_accepts_distinct():
    a = AnchorSet(np.array([0.1, 0.2, 0.3]))
    assert a.locations.shape == (3, 1)


def test_gram_shape():
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=1.0)
    a = AnchorSet(np.linspace(0, 1, 7))
    g = gram(k, a)
    assert g.shape == (7, 7)
    assert np.allclose(np.diag(g), 1.0)


def test_representer_reproduces_anchor_values(rng):
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.5)
    # well separated anchors keep the gram matrix comfortably conditioned
    pts = np.linspace(0, 2, 12) + rng.uniform(-0.05, 0.05, 12)
    z = rng.normal(size=12)
    rep = GPRepresenter(k, AnchorSet(pts), z)
    vals = rep.evaluate(pts[:, None])
    assert np.max(np.abs(vals - z)) <= 1e-8


def test_representer_d1_matches_fd(rng):
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.8, smoothing=1e-6)
    pts = np.linspace(0.1, 1.9, 9)
    z = rng.normal(size=9)
    rep = GPRepresenter(k, AnchorSet(pts), z)
    for x0 in (0.3, 0.95, 1.6):
        d1 = float(np.ravel(rep.evaluate_d1(np.array([[x0]])))[0])
        fd = central_diff(lambda t: float(np.ravel(rep.evaluate(t[None, :]))[0]),
                          np.array([x0]), 1e-6)[0]
        assert abs(d1 - fd) <= 1e-6 * (1 + abs(fd))


def test_representer_quad_form(rng):
    k = KernelSpec(kind="matern52", sigma2=2.0, rho=0.6)
    pts = np.linspace(0, 1, 8)
    z = rng.normal(size=8)
    rep = GPRepresenter(k, AnchorSet(pts), z)
    kk = gram(k, AnchorSet(pts))
    expect = z @ np.linalg.solve(kk, z)
    assert rep.quad_form() == pytest.approx(expect, rel=1e-6)
    assert rep.quad_form() >= 0


def test_with_latents_shares_factorization(rng):
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.5)
    pts = np.linspace(0, 1, 6)
    rep = GPRepresenter(k, AnchorSet(pts), np.zeros(6))
    z = rng.normal(size=6)
    rep2 = rep.with_latents(z)
    vals = rep2.evaluate(pts[:, None])
    assert np.max(np.abs(vals - z)) <= 1e-8


def test_solve_applies_inverse(rng):
    k = KernelSpec(kind="matern52", sigma2=1.0, rho=0.5)
    pts = np.linspace(0, 1, 6)
    rep = GPRepresenter(k, AnchorSet(pts), np.zeros(6))
    rhs = rng.normal(size=6)
    x = rep.solve(rhs)
    kk = gram(k, AnchorSet(pts))
    eta = 1e-10 * np.trace(kk) / 6
    assert np.allclose((kk + eta * np.eye(6)) @ x, rhs, atol=1e-9)
