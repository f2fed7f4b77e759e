"""Joint recovery of the spatial cost and the equilibrium from partial data.

The spatial cost enters the equilibrium objective linearly, so replacing
it by a kernel-regularized latent vector turns recovery into a saddle
problem: minimize over density and flux, maximize over the latent cost
values at the grid points and at the cost-observation sites,

    min_{m, w}  max_v   sum_cells [ b(m, w) + F(m) ]
                        + (alpha_m / 2) |m[obs] - m_obs|^2
                        + sum_cells v1 * m
                        - (alpha_vo / 2) |v2 - v_obs|^2
                        - (alpha_v / 2) v' K^{-1} v
    s.t.                G(m, w) = rhs,

where K is the Gram matrix of the prior kernel over all latent sites.
``alpha_vo = inf`` pins the latents at observation sites to the observed
values exactly; this is the default and the intended regime.

Given the density, the inner maximization is an unconstrained concave
quadratic with a closed-form solution, so the solver alternates one
exact latent update (at the extrapolated density) with the same
dual-ascent and proximal steps used by the forward solver.  A frozen
latent vector reduces the saddle to a forward problem, which the Newton
polish solves to near machine precision; refreshing the latents around
that inner solve is a contractive fixed-point iteration for tight
priors, and serves as the accelerator, exactly as the polish does for
the forward solver.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve
from scipy.spatial import cKDTree

from .forward import (
    MFGProblem,
    SaddleState,
    _Warm,
    _w_cells,
    _w_field,
    newton_polish,
    objective_value,
)
from .gp import AnchorSet, GPRepresenter, KernelSpec
from .grid import operator_norm
from .prox import ProxQuery, prox_batch

__all__ = ["InfSupProblem", "InfSupState", "solve_infsup"]

_MIN_OBS_SEPARATION = 1e-9
# observation sites closer than this to a grid anchor are represented by
# the grid anchor itself (the conditional prior already pins its value)
_ANCHOR_MERGE = 1e-10


@dataclass
class InfSupProblem:
    """A forward problem whose spatial cost is unknown and latent.

    ``forward`` must be stationary and carry an all-zero spatial cost;
    the recovered cost takes its place.  Density observations live at
    grid cells (flat indices), cost observations anywhere on the torus.
    """

    forward: MFGProblem
    kernel: KernelSpec
    m_obs_idx: np.ndarray = None
    m_obs_val: np.ndarray = None
    v_obs_pts: np.ndarray = None
    v_obs_val: np.ndarray = None
    alpha_m: float = 1e5
    alpha_v: float = 2.0
    alpha_vo: float = np.inf

    def __post_init__(self):
        fw = self.forward
        if fw.is_time_dependent:
            raise ValueError("cost recovery is defined for stationary problems")
        if np.any(fw.v):
            raise ValueError(
                "the base problem's spatial cost is the unknown here; "
                "construct it with v = 0"
            )
        n = fw.grid.n_cells
        idx = np.zeros(0, dtype=int) if self.m_obs_idx is None else \
            np.asarray(self.m_obs_idx)
        if idx.size and not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("density observations are indexed by grid cells")
        idx = idx.astype(int).ravel()
        val = np.zeros(0) if self.m_obs_val is None else \
            np.asarray(self.m_obs_val, dtype=float).ravel()
        if idx.shape != val.shape:
            raise ValueError("density observation indices and values disagree")
        if idx.size:
            if idx.min() < 0 or idx.max() >= n:
                raise ValueError(f"density observation index out of range 0..{n - 1}")
            if len(np.unique(idx)) != len(idx):
                raise ValueError("duplicate density observation cells")
        pts = np.zeros((0, fw.grid.dim)) if self.v_obs_pts is None else \
            np.asarray(self.v_obs_pts, dtype=float).reshape(-1, fw.grid.dim)
        vo = np.zeros(0) if self.v_obs_val is None else \
            np.asarray(self.v_obs_val, dtype=float).ravel()
        if len(pts) != len(vo):
            raise ValueError("cost observation points and values disagree")
        if not (np.all(np.isfinite(val)) and np.all(np.isfinite(pts))
                and np.all(np.isfinite(vo))):
            raise ValueError("observations must be finite")
        if len(pts) > 1:
            dist, _ = cKDTree(pts).query(pts, k=2)
            if dist[:, 1].min() < _MIN_OBS_SEPARATION:
                raise ValueError("cost observation sites must be pairwise distinct")
        if not (np.isfinite(self.alpha_m) and self.alpha_m >= 0):
            raise ValueError("alpha_m must be a finite nonnegative weight")
        if not (np.isfinite(self.alpha_v) and self.alpha_v > 0):
            raise ValueError("alpha_v must be a finite positive weight")
        if not self.alpha_vo >= 0:
            raise ValueError("alpha_vo must be nonnegative (inf pins the values)")
        if np.isfinite(self.alpha_vo) and len(pts):
            d, _ = cKDTree(fw.grid.points()).query(pts)
            if d.min() < _MIN_OBS_SEPARATION:
                raise ValueError(
                    "with a finite alpha_vo, cost observations may not sit on "
                    "grid points (the joint Gram matrix would be singular)"
                )
        self.m_obs_idx = idx
        self.m_obs_val = val
        self.v_obs_pts = pts
        self.v_obs_val = vo
        self.alpha_m = float(self.alpha_m)
        self.alpha_v = float(self.alpha_v)
        self.alpha_vo = float(self.alpha_vo)


@dataclass
class InfSupState(SaddleState):
    """Saddle solver outcome plus the recovered latent cost.

    ``v_grid``/``v_obs`` are the latent cost values at the grid anchors
    and observation sites; they are the exact maximizers at the returned
    density.  ``v_drift`` is the sup-norm change of the last latent
    refresh, i.e. how stale the returned density is with respect to its
    own latents.  ``v_misfit`` is the sup-norm gap between ``v_obs`` and
    the observed values (zero when the values are pinned).
    """

    v_grid: np.ndarray = None
    v_obs: np.ndarray = None
    v_drift: float = np.inf
    v_misfit: float = 0.0
    outer_rounds: int = 0
    v_system: object = None


class _LatentUpdate:
    """Closed-form maximizer of the latent block at a fixed density.

    All solve-dependent factorizations happen once at construction; the
    per-density update is then a dense matrix-vector product.  Raises
    ``ValueError`` when the update system fails to be positive definite
    (degenerate kernel or weights too small against the jitter).
    """

    def __init__(self, problem: InfSupProblem):
        fw = problem.forward
        kernel = problem.kernel
        self.alpha_v = problem.alpha_v
        self.alpha_vo = problem.alpha_vo
        self.obs_vals = problem.v_obs_val
        grid_pts = fw.grid.points()
        obs = problem.v_obs_pts
        n = len(grid_pts)
        k11 = kernel.pairwise(grid_pts, grid_pts)
        self.hard = not np.isfinite(problem.alpha_vo)
        if self.hard:
            if len(obs):
                k22 = kernel.pairwise(obs, obs)
                jitter = 1e-10 * float(np.trace(k22)) / len(obs)
                k22_j = k22 + jitter * np.eye(len(obs))
                try:
                    factor = cho_factor(k22_j, lower=True)
                except np.linalg.LinAlgError as exc:
                    raise ValueError(
                        "latent update system is not positive definite; "
                        "check the kernel parameters"
                    ) from exc
                k12 = kernel.pairwise(grid_pts, obs)
                cross = cho_solve(factor, k12.T)
                # one refinement pass against the unjittered block keeps
                # the conditional interpolant exact well below the jitter
                cross += cho_solve(factor, k12.T - k22 @ cross)
                s_mat = k11 - k12 @ cross
                self._c0 = cross.T @ self.obs_vals
            else:
                s_mat = k11
                self._c0 = np.zeros(n)
            self._s_mat = 0.5 * (s_mat + s_mat.T)
            if float(np.min(np.diag(self._s_mat))) < -1e-8 * kernel.sigma2:
                raise ValueError(
                    "conditional prior covariance lost positivity; "
                    "check the kernel parameters"
                )
        else:
            pts = np.vstack([grid_pts, obs])
            k_full = kernel.pairwise(pts, pts)
            sig = np.concatenate([np.zeros(n), np.full(len(obs), problem.alpha_vo)])
            # (alpha_v K^{-1} + Sigma) u = b  <=>  (alpha_v I + K Sigma) u = K b
            system = problem.alpha_v * np.eye(len(pts)) + k_full * sig[None, :]
            try:
                self._lu = lu_factor(system)
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    "latent update system is not positive definite; "
                    "check the kernel parameters"
                ) from exc
            if float(np.min(np.abs(np.diag(self._lu[0])))) < 1e-12 * problem.alpha_v:
                raise ValueError("latent update system is numerically singular")
            self._k_full = k_full
        self.n_grid = n

    def _solve_finite(self, m_flat):
        b = np.concatenate([m_flat, self.alpha_vo * self.obs_vals])
        return lu_solve(self._lu, self._k_full @ b)

    def grid_part(self, m_flat) -> np.ndarray:
        """Latent cost values at the grid anchors for a given density."""
        if self.hard:
            return self._s_mat @ m_flat / self.alpha_v + self._c0
        return self._solve_finite(m_flat)[: self.n_grid]

    def latents(self, m_flat):
        """Full latent vector split as (grid values, observation values)."""
        if self.hard:
            return self.grid_part(m_flat), self.obs_vals.copy()
        u = self._solve_finite(m_flat)
        return u[: self.n_grid], u[self.n_grid :]

    def energy(self, m_flat) -> float:
        """Maximized latent contribution to the objective.

        Up to a data-only constant in the pinned case, so objective
        values are comparable within a run.
        """
        if self.hard:
            v1 = self.grid_part(m_flat)
            return 0.5 * float(m_flat @ (v1 + self._c0))
        u = self._solve_finite(m_flat)
        b = np.concatenate([m_flat, self.alpha_vo * self.obs_vals])
        return 0.5 * float(b @ u) - 0.5 * self.alpha_vo * float(
            self.obs_vals @ self.obs_vals
        )

    def misfit(self, v2) -> float:
        if len(v2) == 0:
            return 0.0
        return float(np.max(np.abs(v2 - self.obs_vals)))


def _cp_saddle(problem, upd, op, *, tau, gamma_cp, theta, tol, v_tol,
               max_iters, check_every, warm, beta, tgt, callback):
    """Primal-dual loop with the exact latent update at the extrapolation."""
    fw = problem.forward
    grid = fw.grid
    k = grid.n_flux
    coupling = fw.couplings()[0]

    if warm is not None:
        m = warm.m.copy()
        w = warm.w.copy()
        sig_c, sig_m = warm.sigma[0].copy(), float(warm.sigma[1])
    else:
        m = np.ones(grid.shape)
        w = np.zeros((k,) + grid.shape)
        sig_c, sig_m = np.zeros(grid.shape), 0.0
    m_bar_f, w_bar_f = m.copy(), w.copy()

    history = []
    y_prev_check = None
    warm_cells = None
    it = 0
    converged = False
    residual = np.inf
    rel_change = np.inf
    drift = np.inf
    v_used = upd.grid_part(m_bar_f.ravel())

    for it in range(1, max_iters + 1):
        v_used = upd.grid_part(m_bar_f.ravel())
        cont, total = op.apply(m_bar_f, w_bar_f)
        sig_c += gamma_cp * cont
        sig_m += gamma_cp * (total - 1.0)

        m_adj, w_adj = op.apply_adjoint(sig_c, sig_m)
        m_in = (m - tau * m_adj).ravel()
        w_in = _w_cells(w - tau * w_adj, grid)
        query = ProxQuery(m_in, w_in, tau, fw.q, fw.lam, v_used, coupling,
                          beta, tgt)
        m_new_v, w_new_c = prox_batch(query, warm=warm_cells)
        warm_cells = (m_new_v, w_new_c)
        m_new = m_new_v.reshape(grid.shape)
        w_new = _w_field(w_new_c, grid)

        m_bar_f = m_new + theta * (m_new - m)
        w_bar_f = w_new + theta * (w_new - w)
        m, w = m_new, w_new

        if it % check_every == 0 or it == max_iters:
            residual = op.residual(m, w)
            y_norm = float(np.sqrt(np.sum(m * m) + np.sum(w * w)))
            if y_prev_check is not None:
                dm = m - y_prev_check[0]
                dw = w - y_prev_check[1]
                rel_change = float(
                    np.sqrt(np.sum(dm * dm) + np.sum(dw * dw)) / max(1.0, y_norm)
                )
            y_prev_check = (m.copy(), w.copy())
            drift = float(np.max(np.abs(upd.grid_part(m.ravel()) - v_used)))
            obj = objective_value(fw, m, w, beta, tgt) + upd.energy(m.ravel())
            history.append({"iter": it, "residual": residual,
                            "rel_change": rel_change, "objective": obj,
                            "v_drift": drift})
            if callback is not None:
                callback(it, residual, rel_change)
            if max(residual, rel_change) <= tol and drift <= v_tol:
                converged = True
                break
    return m, w, (sig_c, sig_m), it, converged, residual, rel_change, drift, history


def _freeze_polish(problem, upd, op, warm, *, beta, tgt, tol, v_tol,
                   polish_tol, rounds, max_outer):
    """Fixed point of (solve with frozen latents, refresh latents).

    Returns ``(m, w, sigma, drift, newton_rounds, cycles)`` on success,
    ``None`` when the inner polish fails, the refresh stops contracting,
    or the cycle budget runs out.
    """
    fw = problem.forward
    m, w, sigma = warm.m, warm.w, warm.sigma
    v1 = upd.grid_part(m.ravel())
    total_rounds = 0
    omega = 1.0
    drift_prev = np.inf
    growths = 0
    for cycle in range(1, max_outer + 1):
        frozen = replace(fw, v=v1.reshape(fw.grid.shape))
        m_new, w_new, sig_new, used, ok = newton_polish(
            frozen, m, w, sigma, beta=beta, tgt=tgt,
            tol=polish_tol, max_rounds=rounds,
        )
        total_rounds += used
        if not ok:
            return None
        m, w, sigma = m_new, w_new, sig_new
        v_next = upd.grid_part(m.ravel())
        drift = float(np.max(np.abs(v_next - v1)))
        if drift <= v_tol:
            if op.residual(m, w) > tol:
                return None
            return m, w, sigma, drift, total_rounds, cycle
        if drift > drift_prev:
            growths += 1
            if growths >= 3:
                return None
            omega = max(0.125, 0.5 * omega)  # refresh overshoots; damp it
        drift_prev = drift
        v1 = v1 + omega * (v_next - v1)
    return None


def _representer(problem: InfSupProblem, v1, v2) -> GPRepresenter:
    """Bind the latents to anchors; observation sites on grid anchors merge."""
    grid_pts = problem.forward.grid.points()
    obs = problem.v_obs_pts
    if len(obs):
        d, _ = cKDTree(grid_pts).query(obs)
        keep = d > _ANCHOR_MERGE
        anchors = np.vstack([grid_pts, obs[keep]])
        latents = np.concatenate([v1, v2[keep]])
    else:
        anchors = grid_pts
        latents = v1
    return GPRepresenter(problem.kernel, AnchorSet(anchors), latents)


def solve_infsup(problem: InfSupProblem, *, tol=1e-6, max_iters=200_000,
                 check_every=100, tau=None, gamma_cp=None, theta=1.0,
                 polish=True, method="auto", polish_tol=1e-11,
                 polish_every=1000, v_tol=None, max_outer=60, callback=None):
    """Solve the saddle problem; returns ``(m, w, representer, state)``.

    ``v_tol`` bounds the latent refresh drift accepted at convergence
    (default ``tol / 10``); the remaining options mirror the forward
    solver.  The recovered cost is returned as a kernel representer that
    interpolates its latents at the grid anchors and observation sites.
    """
    fw = problem.forward
    op = fw.constraint()
    upd = _LatentUpdate(problem)
    grid = fw.grid
    n = grid.n_cells

    beta = np.zeros(n)
    tgt = np.zeros(n)
    if len(problem.m_obs_idx):
        beta[problem.m_obs_idx] = problem.alpha_m
        tgt[problem.m_obs_idx] = problem.m_obs_val

    if tau is None or gamma_cp is None:
        step = 0.95 / operator_norm(op)
        tau = step if tau is None else tau
        gamma_cp = step if gamma_cp is None else gamma_cp
    if v_tol is None:
        v_tol = max(0.1 * tol, 1e-12)
    if method == "cp":
        polish = False

    def finish(m, w, sigma, *, iterations, converged, residual, rel_change,
               drift, method_used, history, polish_rounds, outer_rounds):
        v1, v2 = upd.latents(m.ravel())
        objective = objective_value(fw, m, w, beta, tgt) + upd.energy(m.ravel())
        state = InfSupState(
            m=m, w=w, sigma=sigma, iterations=iterations, converged=converged,
            residual=residual, rel_change=rel_change, objective=objective,
            method=method_used, history=history, polish_rounds=polish_rounds,
            v_grid=v1, v_obs=v2, v_drift=drift, v_misfit=upd.misfit(v2),
            outer_rounds=outer_rounds, v_system=upd,
        )
        return m, w, _representer(problem, v1, v2), state

    def attempt(warm_state, rounds, iters_so_far, hist):
        hit = _freeze_polish(problem, upd, op, warm_state, beta=beta, tgt=tgt,
                             tol=tol, v_tol=v_tol, polish_tol=polish_tol,
                             rounds=rounds, max_outer=max_outer)
        if hit is None:
            return None
        m, w, sigma, drift, newton_rounds, cycles = hit
        return finish(
            m, w, sigma, iterations=iters_so_far, converged=True,
            residual=op.residual(m, w), rel_change=0.0, drift=drift,
            method_used="polish" if iters_so_far == 0 else "cp+polish",
            history=hist, polish_rounds=newton_rounds, outer_rounds=cycles,
        )

    cold = _Warm(np.ones(grid.shape),
                 np.zeros((grid.n_flux,) + grid.shape),
                 (np.zeros(grid.shape), 0.0))
    if polish and method in ("auto", "polish"):
        result = attempt(cold, 15, 0, [])
        if result is not None:
            return result

    current = cold
    total = 0
    history = []
    converged = False
    residual = np.inf
    rel_change = np.inf
    drift = np.inf
    gap = polish_every
    while total < max_iters:
        chunk = max_iters - total
        if polish and polish_every:
            chunk = min(chunk, gap)
        m, w, sigma, iters, converged, residual, rel_change, drift, hist = \
            _cp_saddle(problem, upd, op, tau=tau, gamma_cp=gamma_cp,
                       theta=theta, tol=tol, v_tol=v_tol, max_iters=chunk,
                       check_every=check_every, warm=current, beta=beta,
                       tgt=tgt, callback=callback)
        history.extend({**h, "iter": h["iter"] + total} for h in hist)
        total += iters
        current = _Warm(m, w, sigma)
        if converged:
            break
        if polish and total < max_iters:
            result = attempt(current, 12, total, history)
            if result is not None:
                return result
            gap *= 2  # polish attempts back off while the iterate is far out
    if polish and not converged:
        result = attempt(current, 50, total, history)
        if result is not None:
            return result
    return finish(
        current.m, current.w, current.sigma, iterations=total,
        converged=converged, residual=residual, rel_change=rel_change,
        drift=drift, method_used="cp", history=history,
        polish_rounds=0, outer_rounds=0,
    )
