"""Kernels, Gram assembly, and representer surrogates.

Unknown functions (the spatial cost and the coupling) are modeled as
posterior means of a Gaussian process conditioned on point anchors:

    g(x) = k(x, anchors) @ (K + eta*I)^{-1} @ z

where ``z`` holds the function values at the anchors.  The surrogate is
linear in ``z``, which every outer optimizer here exploits.  Representers
are immutable after construction; evaluation is thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

__all__ = ["KernelSpec", "AnchorSet", "gram", "GPRepresenter"]

_SQRT5 = np.sqrt(5.0)


def _as_points(x) -> np.ndarray:
    """Normalize locations to an ``(n, d)`` float array."""
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None]
    elif pts.ndim != 2:
        raise ValueError(f"locations must be scalars, vectors, or (n, d); got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class KernelSpec:
    """Covariance kernel with fixed hyperparameters.

    kind : "matern52" uses the smoothed distance d = sqrt(|x-y|^2 + smoothing);
        "periodic" is the period-1 exponential-of-sine kernel
        sigma2 * exp(-sum_d 2 sin^2(pi (x_d - y_d)) / rho^2).
    sigma2 : amplitude (variance at zero separation for the periodic kernel).
    rho : lengthscale.
    smoothing : the epsilon inside the Matern distance; must be positive when
        analytic derivatives are requested.
    """

    kind: str
    sigma2: float = 1.0
    rho: float = 1.0
    smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in ("matern52", "periodic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.sigma2 <= 0 or self.rho <= 0:
            raise ValueError("amplitude and lengthscale must be positive")
        if self.smoothing < 0:
            raise ValueError("smoothing must be nonnegative")

    def pairwise(self, x, y) -> np.ndarray:
        """Kernel matrix between two location sets, shape ``(nx, ny)``."""
        px, py = _as_points(x), _as_points(y)
        diff = px[:, None, :] - py[None, :, :]
        if self.kind == "periodic":
            arg = np.sum(np.sin(np.pi * diff) ** 2, axis=-1)
            return self.sigma2 * np.exp(-2.0 * arg / self.rho**2)
        d = np.sqrt(np.sum(diff * diff, axis=-1) + self.smoothing)
        ad = (_SQRT5 / self.rho) * d
        return self.sigma2 * (1.0 + ad + ad * ad / 3.0) * np.exp(-ad)

    def _require_scalar_matern(self, op: str):
        if self.kind != "matern52":
            raise ValueError(f"{op} is only available for the matern52 kernel")
        if self.smoothing <= 0:
            raise ValueError(
                f"{op} requires positive smoothing (the Matern 5/2 kernel is "
                "not twice differentiable at coincident points otherwise)"
            )

    def pairwise_d1(self, x, y) -> np.ndarray:
        """d/dx of the kernel for scalar locations, shape ``(nx, ny)``."""
        self._require_scalar_matern("pairwise_d1")
        px, py = _as_points(x), _as_points(y)
        if px.shape[1] != 1 or py.shape[1] != 1:
            raise ValueError("kernel derivatives are defined for scalar locations")
        u = px[:, None, 0] - py[None, :, 0]
        d = np.sqrt(u * u + self.smoothing)
        a = _SQRT5 / self.rho
        return -(self.sigma2 * a * a / 3.0) * (1.0 + a * d) * np.exp(-a * d) * u

    def pairwise_d2(self, x, y) -> np.ndarray:
        """d^2/dx^2 of the kernel for scalar locations."""
        self._require_scalar_matern("pairwise_d2")
        px, py = _as_points(x), _as_points(y)
        if px.shape[1] != 1 or py.shape[1] != 1:
            raise ValueError("kernel derivatives are defined for scalar locations")
        u = px[:, None, 0] - py[None, :, 0]
        d = np.sqrt(u * u + self.smoothing)
        a = _SQRT5 / self.rho
        return (self.sigma2 * a * a / 3.0) * np.exp(-a * d) * (a * a * u * u - 1.0 - a * d)


@dataclass(frozen=True)
class AnchorSet:
    """Ordered point-evaluation functionals (Diracs) for a representer."""

    locations: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.locations)
        object.__setattr__(self, "locations", pts)
        if len(pts) == 0:
            raise ValueError("anchor set must not be empty")
        if len(pts) > 1:
            dist, idx = cKDTree(pts).query(pts, k=2)
            nearest = dist[:, 1]
            j = int(np.argmin(nearest))
            if nearest[j] < 1e-12:
                other = int(idx[j, 1])
                raise ValueError(
                    f"duplicate anchors: locations {j} and {other} coincide at "
                    f"{pts[j]} (Gram matrix would be singular)"
                )

    def __len__(self) -> int:
        return len(self.locations)


def gram(kernel: KernelSpec, anchors: AnchorSet) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(x_i, x_j)`` without jitter."""
    return kernel.pairwise(anchors.locations, anchors.locations)


class GPRepresenter:
    """Posterior-mean surrogate over a fixed anchor set.

    Caches the Cholesky factorization of ``K + eta*I`` at construction; the
    jitter is ``eta = 1e-10 * trace(K)/n``.  ``with_latents`` rebinds the
    coefficient vector while sharing the factorization, keeping per-step
    latent updates cheap inside training loops.
    """

    def __init__(self, kernel: KernelSpec, anchors: AnchorSet, latents, _shared=None):
        self.kernel = kernel
        self.anchors = anchors
        z = np.asarray(latents, dtype=float).ravel()
        if z.shape != (len(anchors),):
            raise ValueError(f"need one latent per anchor: {z.shape} vs {len(anchors)}")
        self.latents = z
        if _shared is None:
            k = gram(kernel, anchors)
            self._gram = k.copy()
            self.jitter = 1e-10 * float(np.trace(k)) / len(anchors)
            k[np.diag_indices_from(k)] += self.jitter
            self._factor = cho_factor(k, lower=True)
        else:
            self.jitter, self._factor, self._gram = _shared
        coef = cho_solve(self._factor, self.latents)
        # one refinement step against the unjittered gram, so anchor values
        # are reproduced far below the jitter-induced error floor
        coef += cho_solve(self._factor, self.latents - self._gram @ coef)
        self._coef = coef

    def with_latents(self, latents) -> "GPRepresenter":
        return GPRepresenter(
            self.kernel, self.anchors, latents,
            _shared=(self.jitter, self._factor, self._gram),
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``(K + eta*I)^{-1}`` to a vector or matrix of columns."""
        return cho_solve(self._factor, np.asarray(rhs, dtype=float))

    def solve_refined(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the refined inverse used for the coefficient vector.

        Matches the operator behind ``coefficients`` exactly, so parameter
        gradients computed with it are consistent with ``evaluate``.
        """
        rhs = np.asarray(rhs, dtype=float)
        x = cho_solve(self._factor, rhs)
        return x + cho_solve(self._factor, rhs - self._gram @ x)

    @property
    def coefficients(self) -> np.ndarray:
        """Cached ``(K + eta*I)^{-1} z``."""
        return self._coef

    def _reduce(self, cross: np.ndarray, x) -> np.ndarray:
        vals = cross @ self._coef
        if np.ndim(x) == 0:
            return float(vals[0])
        return vals

    def evaluate(self, x):
        """Surrogate value(s) at ``x``."""
        return self._reduce(self.kernel.pairwise(x, self.anchors.locations), x)

    def evaluate_d1(self, x):
        """Analytic first derivative of the surrogate (scalar inputs)."""
        return self._reduce(self.kernel.pairwise_d1(x, self.anchors.locations), x)

    def evaluate_d2(self, x):
        """Analytic second derivative of the surrogate (scalar inputs)."""
        return self._reduce(self.kernel.pairwise_d2(x, self.anchors.locations), x)

    def quad_form(self) -> float:
        """RKHS-norm surrogate ``z^T (K + eta*I)^{-1} z``."""
        return float(self.latents @ self._coef)
