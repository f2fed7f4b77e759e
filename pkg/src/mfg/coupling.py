"""Density coupling models F(m) and their parametric families.

A coupling supplies the antiderivative triple ``F``, ``dF`` (= f, the
marginal congestion cost) and ``d2F``, all vectorized over density arrays.
Parametric families additionally expose a flat parameter vector, the
sensitivity of ``dF`` to those parameters, and a smoothness penalty used
by the outer recovery loop.

Families
--------
PowerLaw        f(m) = m^alpha with alpha = softplus(beta) + 1 > 1.
ConvexLibrary   f(m) = sum_k softplus(g_k) m^k, a positive-combination
                library of monomials, convex by construction.
BasisExpansion  f(m) = sum_k z_k phi_k(m) for user-supplied bases.
GPPseudo        f interpolated through pseudo-point values z = zt^2 with
                a kernel representer; values stay nonnegative at the
                pseudo-points by construction.
"""

from __future__ import annotations

import numpy as np

from .gp import AnchorSet, GPRepresenter, KernelSpec

__all__ = [
    "CouplingModel",
    "FixedCoupling",
    "PowerLaw",
    "ConvexLibrary",
    "BasisExpansion",
    "GPPseudo",
    "entropy_coupling",
    "monomial_coupling",
    "zero_coupling",
]


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class CouplingModel:
    """Base interface; fixed (non-trainable) couplings use it directly."""

    def F(self, m):
        raise NotImplementedError

    def dF(self, m):
        raise NotImplementedError

    def d2F(self, m):
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return 0

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, theta: np.ndarray):
        if len(np.atleast_1d(theta)) != 0:
            raise ValueError("coupling has no free parameters")

    def dF_dtheta(self, m) -> np.ndarray:
        """Sensitivity of dF(m) to the parameters, shape (n_params, n)."""
        return np.zeros((0, np.atleast_1d(m).shape[0]))

    def penalty(self):
        """Smoothness/size penalty and its parameter gradient."""
        return 0.0, np.zeros(0)


class FixedCoupling(CouplingModel):
    def __init__(self, f_val, f_d1, f_d2):
        self._val, self._d1, self._d2 = f_val, f_d1, f_d2

    def F(self, m):
        return self._val(np.asarray(m, dtype=float))

    def dF(self, m):
        return self._d1(np.asarray(m, dtype=float))

    def d2F(self, m):
        return self._d2(np.asarray(m, dtype=float))


def entropy_coupling() -> FixedCoupling:
    """F(m) = m log m - m, the coupling whose f(m) = log m."""

    def val(m):
        safe = np.where(m > 0, m, 1.0)
        return np.where(m > 0, m * np.log(safe) - m, 0.0)

    def d1(m):
        with np.errstate(divide="ignore"):
            return np.log(m)

    def d2(m):
        with np.errstate(divide="ignore"):
            return 1.0 / m

    return FixedCoupling(val, d1, d2)


def monomial_coupling(coef: float = 0.25, power: float = 4.0) -> FixedCoupling:
    """F(m) = coef * m^power (so f(m) = coef*power*m^(power-1))."""

    return FixedCoupling(
        lambda m: coef * m**power,
        lambda m: coef * power * m ** (power - 1.0),
        lambda m: coef * power * (power - 1.0) * m ** (power - 2.0),
    )


def zero_coupling() -> FixedCoupling:
    return FixedCoupling(np.zeros_like, np.zeros_like, np.zeros_like)


class PowerLaw(CouplingModel):
    """f(m) = m^alpha with alpha = softplus(beta) + 1.

    The single latent beta keeps alpha > 1, so F stays strictly convex.
    """

    def __init__(self, beta: float = 1.0):
        self.beta = float(beta)

    @property
    def alpha(self) -> float:
        return float(softplus(self.beta)) + 1.0

    def F(self, m):
        a = self.alpha
        return np.asarray(m, dtype=float) ** (a + 1.0) / (a + 1.0)

    def dF(self, m):
        return np.asarray(m, dtype=float) ** self.alpha

    def d2F(self, m):
        a = self.alpha
        m = np.asarray(m, dtype=float)
        with np.errstate(divide="ignore"):
            return a * m ** (a - 1.0)

    @property
    def n_params(self) -> int:
        return 1

    def get_params(self):
        return np.array([self.beta])

    def set_params(self, theta):
        self.beta = float(np.atleast_1d(theta)[0])

    def dF_dtheta(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        a = self.alpha
        safe = np.where(m > 0, m, 1.0)
        grad = np.where(m > 0, m**a * np.log(safe), 0.0)
        return (grad * float(sigmoid(self.beta)))[None, :]

    def penalty(self):
        return self.beta**2, np.array([2.0 * self.beta])


class ConvexLibrary(CouplingModel):
    """f(m) = sum_k g_k m^(p_k), g_k = softplus(latent_k) >= 0."""

    def __init__(self, latents, powers=None):
        self.latents = np.atleast_1d(np.asarray(latents, dtype=float)).copy()
        if powers is None:
            powers = np.arange(1, len(self.latents) + 1, dtype=float)
        self.powers = np.asarray(powers, dtype=float)
        if self.powers.shape != self.latents.shape:
            raise ValueError("one power per library weight")

    @property
    def weights(self):
        return softplus(self.latents)

    def F(self, m):
        m = np.asarray(m, dtype=float)
        g = self.weights
        return sum(
            g[k] * m ** (self.powers[k] + 1.0) / (self.powers[k] + 1.0)
            for k in range(len(g))
        )

    def dF(self, m):
        m = np.asarray(m, dtype=float)
        g = self.weights
        return sum(g[k] * m ** self.powers[k] for k in range(len(g)))

    def d2F(self, m):
        m = np.asarray(m, dtype=float)
        g = self.weights
        with np.errstate(divide="ignore"):
            out = sum(
                g[k] * self.powers[k] * m ** (self.powers[k] - 1.0)
                for k in range(len(g))
            )
        return out

    @property
    def n_params(self) -> int:
        return len(self.latents)

    def get_params(self):
        return self.latents.copy()

    def set_params(self, theta):
        self.latents = np.atleast_1d(np.asarray(theta, dtype=float)).copy()

    def dF_dtheta(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        sig = sigmoid(self.latents)
        return sig[:, None] * np.stack([m**p for p in self.powers])

    def penalty(self):
        g = self.weights
        val = float(np.sum(g**2))
        grad = 2.0 * g * sigmoid(self.latents)
        return val, grad


class BasisExpansion(CouplingModel):
    """f(m) = sum_k z_k phi_k(m) over user-supplied basis functions.

    Each basis entry is a triple (antiderivative, phi, phi') of callables.
    """

    def __init__(self, coefficients, basis):
        self.coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float)).copy()
        self.basis = list(basis)
        if len(self.basis) != len(self.coefficients):
            raise ValueError("one coefficient per basis function")

    def F(self, m):
        m = np.asarray(m, dtype=float)
        return sum(z * b[0](m) for z, b in zip(self.coefficients, self.basis))

    def dF(self, m):
        m = np.asarray(m, dtype=float)
        return sum(z * b[1](m) for z, b in zip(self.coefficients, self.basis))

    def d2F(self, m):
        m = np.asarray(m, dtype=float)
        return sum(z * b[2](m) for z, b in zip(self.coefficients, self.basis))

    @property
    def n_params(self) -> int:
        return len(self.coefficients)

    def get_params(self):
        return self.coefficients.copy()

    def set_params(self, theta):
        self.coefficients = np.atleast_1d(np.asarray(theta, dtype=float)).copy()

    def dF_dtheta(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return np.stack([b[1](m) for b in self.basis])

    def penalty(self):
        val = float(np.sum(self.coefficients**2))
        return val, 2.0 * self.coefficients


class GPPseudo(CouplingModel):
    """f(m) represented through kernel pseudo-points.

    The latent vector zt parametrizes pseudo-point values z = zt^2, which
    a kernel representer interpolates; f(m) = k(m, X) K^-1 z.  F is the
    antiderivative of f, computed once on a dense cached grid (it is only
    ever needed up to the additive constant F(0) = 0).
    """

    def __init__(self, kernel: KernelSpec, points, z_tilde):
        self.kernel = kernel
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        self.anchors = AnchorSet(pts)
        self.z_tilde = np.atleast_1d(np.asarray(z_tilde, dtype=float)).copy()
        if self.z_tilde.shape[0] != pts.shape[0]:
            raise ValueError("one latent per pseudo-point")
        self._rep = None
        self._grid = None
        self._cumint = None

    def _representer(self) -> GPRepresenter:
        if self._rep is None:
            self._rep = GPRepresenter(self.kernel, self.anchors, self.z_tilde**2)
        return self._rep

    def _invalidate(self):
        self._rep = None
        self._grid = None
        self._cumint = None

    def _ensure_grid(self, m_max: float):
        target = max(2.0 * max(float(np.max(self.anchors.locations)), 1.0), m_max * 1.5, 1.0)
        if self._grid is not None and self._grid[-1] >= m_max:
            return
        n = int(max(4096, 2048 * target))
        grid = np.linspace(0.0, target, n + 1)
        vals = self._representer().evaluate(grid[:, None])
        h = grid[1] - grid[0]
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * h)])
        self._grid, self._cumint = grid, cum

    def F(self, m):
        m = np.asarray(m, dtype=float)
        hi = float(np.max(m, initial=0.0))
        self._ensure_grid(hi)
        return np.interp(m, self._grid, self._cumint)

    def dF(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return self._representer().evaluate(m[:, None])

    def d2F(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return self._representer().evaluate_d1(m[:, None])

    @property
    def n_params(self) -> int:
        return self.z_tilde.shape[0]

    def get_params(self):
        return self.z_tilde.copy()

    def set_params(self, theta):
        self.z_tilde = np.atleast_1d(np.asarray(theta, dtype=float)).copy()
        self._invalidate()

    def dF_dtheta(self, m):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        kv = self.kernel.pairwise(m[:, None], self.anchors.locations)
        w = self._representer().solve_refined(kv.T)  # (n_anchor, n_eval)
        return w * (2.0 * self.z_tilde)[:, None]

    def penalty(self):
        rep = self._representer()
        val = float(rep.quad_form())
        grad = 2.0 * rep.coefficients * 2.0 * self.z_tilde
        return val, grad
