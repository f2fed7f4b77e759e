"""Periodic finite-difference grids and the linear operators of the
discrete continuity constraint.

The spatial domain is the unit torus in one or two dimensions, sampled at
cell centers ``x_i = i*h`` (``h = 1/n``).  Fluxes carry ``2*dim`` one-sided
components per cell in the fixed order

    0: forward x-difference  (>= 0)
    1: backward x-difference (<= 0)
    2: forward y-difference  (>= 0)
    3: backward y-difference (<= 0)

with the sign cone K enforced by the proximal maps.  All operators here are
pure functions of immutable grids and are safe for concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TorusGrid",
    "TimeGrid",
    "laplacian",
    "divergence",
    "divergence_adjoint",
    "project_cone",
    "cone_violation",
    "mass",
    "StationaryConstraint",
    "TimeDependentConstraint",
    "apply_constraint",
    "operator_norm",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic mesh of the unit torus.

    Parameters
    ----------
    dim : 1 or 2.
    n : number of cells per dimension; the spacing is ``h = 1/n``.
    origin : coordinate of cell 0 per dimension (default 0); cell centers
        are ``origin + i*h`` with periodic identification.
    """

    dim: int
    n: int
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 2:
            raise ValueError(f"need at least 2 cells per dimension, got {self.n}")
        if abs(self.h * self.n - 1.0) > 1e-15:
            raise ValueError("h*n must equal 1")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def n_cells(self) -> int:
        return self.n**self.dim

    @property
    def n_flux(self) -> int:
        """Number of one-sided flux components per cell."""
        return 2 * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def wrap(self, idx: int) -> int:
        """Periodic index identification along one axis."""
        return idx % self.n

    def coordinates(self):
        """Cell-center coordinate arrays, each of shape ``self.shape``."""
        axes = [self.origin[d] + self.h * np.arange(self.n) for d in range(self.dim)]
        if self.dim == 1:
            return (axes[0],)
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def points(self) -> np.ndarray:
        """Cell centers as an ``(n_cells, dim)`` array in flat (C) order."""
        return np.stack([c.ravel() for c in self.coordinates()], axis=1)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, horizon]`` into ``n_steps`` slabs."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")
        if abs(self.dt * self.n_steps - self.horizon) > 1e-15:
            raise ValueError("dt*n_steps must equal horizon")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


def laplacian(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Periodic 3-point (1D) / 5-point (2D) Laplacian, scaled by 1/h^2."""
    h2 = grid.h * grid.h
    out = -2.0 * grid.dim * values
    for ax in range(-grid.dim, 0):
        out = out + np.roll(values, 1, axis=ax) + np.roll(values, -1, axis=ax)
    return out / h2


def divergence(w: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Discrete divergence of a one-sided flux field.

    ``w`` has shape ``(2*dim,) + grid.shape``.  Each forward component is
    differenced backward and each backward component forward, so that the
    adjoint of this map is minus the one-sided gradient pair.
    """
    if w.shape != (grid.n_flux,) + grid.shape:
        raise ValueError(f"flux shape {w.shape} does not match grid {grid.shape}")
    h = grid.h
    out = np.zeros(grid.shape)
    for d in range(grid.dim):
        ax = d - grid.dim  # trailing axes index the grid
        fwd, bwd = w[2 * d], w[2 * d + 1]
        out += (fwd - np.roll(fwd, 1, axis=ax)) / h
        out += (np.roll(bwd, -1, axis=ax) - bwd) / h
    return out


def divergence_adjoint(sigma: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Adjoint of :func:`divergence`; returns a flux-shaped array."""
    h = grid.h
    out = np.empty((grid.n_flux,) + grid.shape)
    for d in range(grid.dim):
        ax = d - grid.dim
        out[2 * d] = (sigma - np.roll(sigma, -1, axis=ax)) / h
        out[2 * d + 1] = (np.roll(sigma, 1, axis=ax) - sigma) / h
    return out


def project_cone(w: np.ndarray) -> np.ndarray:
    """Project flux components onto the sign cone K (even >=0, odd <=0)."""
    out = np.empty_like(w)
    out[0::2] = np.maximum(w[0::2], 0.0)
    out[1::2] = np.minimum(w[1::2], 0.0)
    return out


def cone_violation(w: np.ndarray) -> float:
    """Largest violation of the sign cone (0 for feasible fluxes)."""
    lo = float(np.max(np.maximum(-w[0::2], 0.0), initial=0.0))
    hi = float(np.max(np.maximum(w[1::2], 0.0), initial=0.0))
    return max(lo, hi)


def mass(m: np.ndarray, grid: TorusGrid) -> float:
    """Total mass ``h^dim * sum(m)`` of a density field."""
    return grid.cell_volume * float(np.sum(m))


def _shift_matrix(n: int, k: int) -> sp.csr_matrix:
    """Sparse periodic shift: ``(S x)_i = x_{i-k mod n}``."""
    rows = np.arange(n)
    cols = (rows - k) % n
    return sp.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))


def _axis_shift(grid: TorusGrid, axis: int, k: int) -> sp.csr_matrix:
    s = _shift_matrix(grid.n, k)
    if grid.dim == 1:
        return s
    eye = sp.identity(grid.n, format="csr")
    return sp.kron(s, eye, format="csr") if axis == 0 else sp.kron(eye, s, format="csr")


def laplacian_matrix(grid: TorusGrid) -> sp.csr_matrix:
    """Sparse matrix of :func:`laplacian` in flat (C) cell order."""
    n = grid.n_cells
    acc = -2.0 * grid.dim * sp.identity(n, format="csr")
    for ax in range(grid.dim):
        acc = acc + _axis_shift(grid, ax, 1) + _axis_shift(grid, ax, -1)
    return (acc / grid.h**2).tocsr()


def divergence_matrix(grid: TorusGrid) -> sp.csr_matrix:
    """Sparse matrix of :func:`divergence`; columns blocked by component."""
    eye = sp.identity(grid.n_cells, format="csr")
    blocks = []
    for d in range(grid.dim):
        blocks.append((eye - _axis_shift(grid, d, 1)) / grid.h)
        blocks.append((_axis_shift(grid, d, -1) - eye) / grid.h)
    return sp.hstack(blocks, format="csr")


@dataclass(frozen=True)
class StationaryConstraint:
    """Affine constraint of the stationary problem.

    Maps ``(m, w)`` to ``(-nu*lap(m) + div(w), h^dim * sum(m))`` with
    right-hand side ``(0, 1)``: the continuity equation plus unit mass.
    """

    grid: TorusGrid
    nu: float = 0.0

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity must be nonnegative")

    @property
    def n_rows(self) -> int:
        return self.grid.n_cells + 1

    @property
    def n_primal(self) -> int:
        return self.grid.n_cells * (1 + self.grid.n_flux)

    def apply(self, m: np.ndarray, w: np.ndarray):
        """Return ``(continuity field, mass scalar)``."""
        if m.shape != self.grid.shape:
            raise ValueError(f"density shape {m.shape} does not match grid")
        cont = divergence(w, self.grid)
        if self.nu != 0.0:
            cont = cont - self.nu * laplacian(m, self.grid)
        return cont, mass(m, self.grid)

    def apply_adjoint(self, sig_cont: np.ndarray, sig_mass: float):
        """Return ``(m part, w part)`` of the transposed action."""
        m_part = np.full(self.grid.shape, self.grid.cell_volume * sig_mass)
        if self.nu != 0.0:
            m_part = m_part - self.nu * laplacian(sig_cont, self.grid)
        return m_part, divergence_adjoint(sig_cont, self.grid)

    def rhs(self):
        return np.zeros(self.grid.shape), 1.0

    def residual(self, m: np.ndarray, w: np.ndarray) -> float:
        """Largest absolute violation across all constraint rows."""
        cont, total = self.apply(m, w)
        return max(float(np.max(np.abs(cont))), abs(total - 1.0))

    def sparse(self) -> sp.csr_matrix:
        """Dense-order matrix: rows (cells, mass), columns (m, w)."""
        n = self.grid.n_cells
        a = -self.nu * laplacian_matrix(self.grid) if self.nu != 0.0 else sp.csr_matrix((n, n))
        top = sp.hstack([a, divergence_matrix(self.grid)])
        mass_row = sp.hstack(
            [
                sp.csr_matrix(np.full((1, n), self.grid.cell_volume)),
                sp.csr_matrix((1, n * self.grid.n_flux)),
            ]
        )
        return sp.vstack([top, mass_row], format="csr")


@dataclass(frozen=True)
class TimeDependentConstraint:
    """Affine constraint of the time-dependent problem.

    Variables are densities ``m^0..m^{n_steps}`` and fluxes ``w^1..w^{n_steps}``.
    Row block ``k`` (k = 1..n_steps) is the implicit-viscosity continuity
    equation ``(m^k - m^{k-1})/dt - nu*lap(m^k) + div(w^k)``; the final block
    pins slab 0, with right-hand side ``(0, m0)``.
    """

    grid: TorusGrid
    time_grid: TimeGrid
    nu: float = 0.0
    m0: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity must be nonnegative")
        m0 = self.m0 if self.m0 is not None else np.ones(self.grid.shape)
        m0 = np.asarray(m0, dtype=float)
        if m0.shape != self.grid.shape:
            raise ValueError("initial density shape does not match grid")
        if np.any(m0 < 0):
            raise ValueError("initial density must be nonnegative")
        object.__setattr__(self, "m0", m0)

    @property
    def n_slabs(self) -> int:
        return self.time_grid.n_steps

    @property
    def n_rows(self) -> int:
        return (self.n_slabs + 1) * self.grid.n_cells

    @property
    def n_primal(self) -> int:
        n = self.grid.n_cells
        return (self.n_slabs + 1) * n + self.n_slabs * self.grid.n_flux * n

    def apply(self, m: np.ndarray, w: np.ndarray):
        """Return ``(continuity residuals over slabs 1.., slab-0 field)``."""
        nt = self.n_slabs
        if m.shape != (nt + 1,) + self.grid.shape:
            raise ValueError(f"density shape {m.shape} does not match slabs+grid")
        if w.shape != (nt, self.grid.n_flux) + self.grid.shape:
            raise ValueError(f"flux shape {w.shape} does not match slabs+grid")
        dt = self.time_grid.dt
        cont = (m[1:] - m[:-1]) / dt
        for k in range(nt):
            cont[k] += divergence(w[k], self.grid)
            if self.nu != 0.0:
                cont[k] -= self.nu * laplacian(m[k + 1], self.grid)
        return cont, m[0].copy()

    def apply_adjoint(self, sig_cont: np.ndarray, sig_pin: np.ndarray):
        nt = self.n_slabs
        dt = self.time_grid.dt
        m_part = np.zeros((nt + 1,) + self.grid.shape)
        m_part[0] = -sig_cont[0] / dt + sig_pin
        m_part[1:] += sig_cont / dt
        m_part[1:-1] -= sig_cont[1:] / dt
        if self.nu != 0.0:
            for k in range(nt):
                m_part[k + 1] -= self.nu * laplacian(sig_cont[k], self.grid)
        w_part = np.empty((nt, self.grid.n_flux) + self.grid.shape)
        for k in range(nt):
            w_part[k] = divergence_adjoint(sig_cont[k], self.grid)
        return m_part, w_part

    def rhs(self):
        nt = self.n_slabs
        return np.zeros((nt,) + self.grid.shape), self.m0.copy()

    def residual(self, m: np.ndarray, w: np.ndarray) -> float:
        """Largest absolute violation across all constraint rows."""
        cont, pin = self.apply(m, w)
        return max(float(np.max(np.abs(cont))), float(np.max(np.abs(pin - self.m0))))

    def sparse(self) -> sp.csr_matrix:
        n = self.grid.n_cells
        nt = self.n_slabs
        dt = self.time_grid.dt
        eye = sp.identity(n, format="csr")
        diag = eye / dt
        if self.nu != 0.0:
            diag = diag - self.nu * laplacian_matrix(self.grid)
        bmat = divergence_matrix(self.grid)
        zero_m = sp.csr_matrix((n, n))
        zero_w = sp.csr_matrix((n, self.grid.n_flux * n))
        rows = []
        for k in range(1, nt + 1):
            blocks = []
            for j in range(nt + 1):
                if j == k - 1:
                    blocks.append(-eye / dt)
                elif j == k:
                    blocks.append(diag)
                else:
                    blocks.append(zero_m)
            for j in range(nt):
                blocks.append(bmat if j == k - 1 else zero_w)
            rows.append(sp.hstack(blocks))
        rows.append(sp.hstack([eye] + [zero_m] * nt + [zero_w] * nt))
        return sp.vstack(rows, format="csr")


def apply_constraint(m: np.ndarray, w: np.ndarray, op) -> tuple:
    """Residual of the affine constraint at ``(m, w)``.

    Stationary operators return ``(continuity field, mass - 1)``;
    time-dependent operators return ``(per-slab continuity, m^0 - m0)``.
    """
    return op.residual(m, w)


def operator_norm(op, n_iters: int = 50, seed: int = 0) -> float:
    """Spectral-norm estimate of a constraint operator by power iteration.

    Runs ``n_iters`` iterations of the normal operator on a seeded random
    primal vector and returns the square root of the Rayleigh quotient.
    """
    rng = np.random.default_rng(seed)
    if isinstance(op, StationaryConstraint):
        m = rng.standard_normal(op.grid.shape)
        w = rng.standard_normal((op.grid.n_flux,) + op.grid.shape)
    else:
        nt = op.n_slabs
        m = rng.standard_normal((nt + 1,) + op.grid.shape)
        w = rng.standard_normal((nt, op.grid.n_flux) + op.grid.shape)
    lam = 1.0
    for _ in range(n_iters):
        norm = np.sqrt(np.sum(m * m) + np.sum(w * w))
        m, w = m / norm, w / norm
        out = op.apply(m, w)
        m, w = op.apply_adjoint(*out)
        # for unit v, |G^T G v| converges to the top eigenvalue of G^T G
        lam = np.sqrt(np.sum(m * m) + np.sum(w * w))
    return float(np.sqrt(lam))
