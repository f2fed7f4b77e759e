"""Forward solvers for potential mean field games on periodic grids.

The variational problem is

    min_{m >= 0, w in K}  sum_cells [ b(m, w) + V*m + F(m) ]
    s.t.                  G(m, w) = rhs

with the kinetic transport cost b(m, w) = |L w|^q / (q m^(q-1)) and the
affine constraint G tying density and flux together (continuity plus
total mass for stationary problems; implicit time stepping plus the
initial-slab pin for time-dependent ones).  The objective is a plain sum
over cells; all published weight calibrations assume this scaling.

Two cooperating solvers:

* a Chambolle-Pock primal-dual loop whose primal step is the exact
  per-cell prox of the cost (steps tau = gamma = 0.95/||G||), stopped
  when both the constraint residual and the relative primal change over
  a 100-iteration window fall below the tolerance;
* a Newton polish on the smooth KKT system restricted to the active set
  (zero flux components and zero-density cells stay pinned, with
  pressure-sign release), which upgrades a CP-accurate point to near
  machine precision and is cheap to warm-start during outer training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .coupling import CouplingModel
from .grid import (
    StationaryConstraint,
    TimeDependentConstraint,
    TimeGrid,
    TorusGrid,
    operator_norm,
)
from .prox import ProxQuery, prox_batch

__all__ = [
    "MFGProblem",
    "SaddleState",
    "solve_stationary",
    "solve_time_dependent",
    "kinetic_cost",
    "objective_value",
    "SolverError",
]


class SolverError(RuntimeError):
    pass


@dataclass
class MFGProblem:
    """Data of one forward problem.

    For time-dependent problems ``v`` may be a single field (reused on
    every slab) or one field per slab, and ``coupling`` may be a single
    model or one per slab.  ``terminal_cost`` is a linear cost on the
    final slab's density.
    """

    grid: TorusGrid
    coupling: CouplingModel | list
    v: np.ndarray
    q: float = 2.0
    lam: np.ndarray = None
    nu: float = 0.0
    time_grid: TimeGrid | None = None
    m0: np.ndarray | None = None
    terminal_cost: np.ndarray | None = None

    def __post_init__(self):
        if self.lam is None:
            self.lam = np.eye(self.grid.n_flux)
        self.lam = np.asarray(self.lam, dtype=float)
        k = self.grid.n_flux
        if self.lam.shape != (k, k):
            raise ValueError(f"metric must be {k}x{k}")
        if self.q <= 1:
            raise ValueError("kinetic exponent must exceed 1")
        if self.nu < 0:
            raise ValueError("viscosity must be nonnegative")
        self.v = np.asarray(self.v, dtype=float)
        if self.time_grid is None:
            if self.v.shape != self.grid.shape:
                raise ValueError("spatial cost shape does not match grid")
        else:
            nt = self.time_grid.n_steps
            if self.v.shape == self.grid.shape:
                self.v = np.broadcast_to(self.v, (nt,) + self.grid.shape).copy()
            if self.v.shape != (nt,) + self.grid.shape:
                raise ValueError("per-slab cost shape does not match slabs+grid")
            if self.terminal_cost is not None:
                self.terminal_cost = np.asarray(self.terminal_cost, dtype=float)
                if self.terminal_cost.shape != self.grid.shape:
                    raise ValueError("terminal cost shape does not match grid")

    @property
    def is_time_dependent(self) -> bool:
        return self.time_grid is not None

    def couplings(self) -> list:
        """One coupling per slab (a singleton list when stationary)."""
        if self.time_grid is None:
            return [self.coupling]
        nt = self.time_grid.n_steps
        if isinstance(self.coupling, (list, tuple)):
            if len(self.coupling) != nt:
                raise ValueError("need one coupling per slab")
            return list(self.coupling)
        return [self.coupling] * nt

    def constraint(self):
        if self.time_grid is None:
            return StationaryConstraint(grid=self.grid, nu=self.nu)
        m0 = self.m0 if self.m0 is not None else np.ones(self.grid.shape)
        return TimeDependentConstraint(
            grid=self.grid, time_grid=self.time_grid, nu=self.nu, m0=m0
        )

    def slab_cost(self, k: int) -> np.ndarray:
        """Linear density cost on slab k (terminal cost folded into the last)."""
        if self.time_grid is None:
            return self.v
        out = self.v[k]
        if k == self.time_grid.n_steps - 1 and self.terminal_cost is not None:
            out = out + self.terminal_cost
        return out


@dataclass
class SaddleState:
    """Primal-dual solution record of a forward solve."""

    m: np.ndarray
    w: np.ndarray
    sigma: tuple
    iterations: int
    converged: bool
    residual: float
    rel_change: float
    objective: float
    method: str
    history: list = field(default_factory=list)
    polish_rounds: int = 0


def kinetic_cost(m, w_cells, lam, q):
    """Per-cell transport cost; w_cells has one row of 2*dim fluxes per cell."""
    met = lam.T @ lam
    r2 = np.maximum(np.einsum("nc,cd,nd->n", w_cells, met, w_cells), 0.0)
    m = np.asarray(m, dtype=float).ravel()
    out = np.zeros_like(m)
    pos = m > 0
    with np.errstate(over="ignore"):
        out[pos] = r2[pos] ** (q / 2.0) * m[pos] ** (1.0 - q) / q
    bad = (~pos) & (r2 > 0)
    out[bad] = np.inf
    return out


def _w_cells(w, grid):
    """(2*dim,)+shape flux array -> (n_cells, 2*dim) row layout."""
    k = grid.n_flux
    return w.reshape(k, grid.n_cells).T


def _w_field(w_cells, grid):
    k = grid.n_flux
    return w_cells.T.reshape((k,) + grid.shape)


def objective_value(problem: MFGProblem, m, w,
                    fidelity_weight=None, fidelity_target=None) -> float:
    """Plain-sum objective of a candidate primal point."""
    couplings = problem.couplings()
    total = 0.0
    if not problem.is_time_dependent:
        cells = _w_cells(w, problem.grid)
        mv = m.ravel()
        total += float(np.sum(kinetic_cost(mv, cells, problem.lam, problem.q)))
        total += float(np.sum(couplings[0].F(mv)))
        total += float(np.sum(problem.v.ravel() * mv))
        if fidelity_weight is not None:
            beta = np.broadcast_to(np.asarray(fidelity_weight, float), mv.shape)
            tgt = np.broadcast_to(np.asarray(fidelity_target, float), mv.shape)
            total += float(np.sum(0.5 * beta * (mv - tgt) ** 2))
        return total
    nt = problem.time_grid.n_steps
    for k in range(nt):
        mv = m[k + 1].ravel()
        cells = _w_cells(w[k], problem.grid)
        total += float(np.sum(kinetic_cost(mv, cells, problem.lam, problem.q)))
        total += float(np.sum(couplings[k].F(mv)))
        total += float(np.sum(problem.slab_cost(k).ravel() * mv))
        if fidelity_weight is not None:
            beta = np.broadcast_to(np.asarray(fidelity_weight[k], float), mv.shape)
            tgt = np.broadcast_to(np.asarray(fidelity_target[k], float), mv.shape)
            total += float(np.sum(0.5 * beta * (mv - tgt) ** 2))
    return total


def _normalize_fidelity(problem, fidelity_weight, fidelity_target):
    """Broadcast fidelity data to per-slab per-cell arrays (or None)."""
    if fidelity_weight is None:
        return None, None
    if not problem.is_time_dependent:
        n = problem.grid.n_cells
        beta = np.broadcast_to(np.asarray(fidelity_weight, float).ravel()
                               if np.ndim(fidelity_weight) else
                               np.full(n, float(fidelity_weight)), (n,)).copy()
        tgt = np.broadcast_to(np.asarray(fidelity_target, float).ravel()
                              if np.ndim(fidelity_target) else
                              np.full(n, float(fidelity_target)), (n,)).copy()
        return beta, tgt
    nt = problem.time_grid.n_steps
    n = problem.grid.n_cells
    beta = np.zeros((nt, n))
    tgt = np.zeros((nt, n))
    bw = np.asarray(fidelity_weight, dtype=float)
    bt = np.asarray(fidelity_target, dtype=float)
    for k in range(nt):
        beta[k] = np.broadcast_to(bw[k].ravel() if bw.ndim > 1 else bw, (n,))
        tgt[k] = np.broadcast_to(bt[k].ravel() if bt.ndim > 1 else bt, (n,))
    return beta, tgt


def _cp_stationary(problem, op, *, tau, gamma_cp, theta, tol, max_iters,
                   check_every, warm, beta, tgt, callback):
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    coupling = problem.couplings()[0]
    v = problem.v.ravel()

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

    for it in range(1, max_iters + 1):
        cont, total = op.apply(m_bar_f, w_bar_f)
        sig_c += gamma_cp * cont
        sig_m += gamma_cp * (total - 1.0)

        m_adj, w_adj = op.apply_adjoint(sig_c, sig_m)
        m_in = (m - tau * m_adj).ravel()
        w_in = _w_cells(w - tau * w_adj, grid)
        query = ProxQuery(m_in, w_in, tau, problem.q, problem.lam, v, coupling,
                          0.0 if beta is None else beta,
                          0.0 if tgt is None else tgt)
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
            history.append({"iter": it, "residual": residual, "rel_change": rel_change})
            if callback is not None:
                callback(it, residual, rel_change)
            if max(residual, rel_change) <= tol:
                converged = True
                break
    return m, w, (sig_c, sig_m), it, converged, residual, rel_change, history


def _cp_time_dependent(problem, op, *, tau, gamma_cp, theta, tol, max_iters,
                       check_every, warm, beta, tgt, callback):
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    nt = problem.time_grid.n_steps
    couplings = problem.couplings()
    shared = all(c is couplings[0] for c in couplings)
    v_slabs = np.stack([problem.slab_cost(j).ravel() for j in range(nt)])

    if warm is not None:
        m = warm.m.copy()
        w = warm.w.copy()
        sig_c, sig_p = warm.sigma[0].copy(), warm.sigma[1].copy()
    else:
        m = np.broadcast_to(op.m0, (nt + 1,) + grid.shape).copy()
        w = np.zeros((nt, k) + grid.shape)
        sig_c, sig_p = np.zeros((nt,) + grid.shape), np.zeros(grid.shape)
    m_bar_f, w_bar_f = m.copy(), w.copy()

    history = []
    y_prev_check = None
    warm_cells = None
    it = 0
    converged = False
    residual = np.inf
    rel_change = np.inf

    for it in range(1, max_iters + 1):
        cont, pin = op.apply(m_bar_f, w_bar_f)
        sig_c += gamma_cp * cont
        sig_p += gamma_cp * (pin - op.m0)

        m_adj, w_adj = op.apply_adjoint(sig_c, sig_p)
        m_in = m - tau * m_adj
        w_in = w - tau * w_adj

        m_new = np.empty_like(m)
        m_new[0] = m_in[0]  # slab 0 carries no cost: its prox is the identity
        w_new = np.empty_like(w)
        if shared:
            mb = m_in[1:].reshape(nt * n)
            wb = w_in.reshape(nt, k, n).transpose(0, 2, 1).reshape(nt * n, k)
            query = ProxQuery(mb, wb, tau, problem.q, problem.lam,
                              v_slabs.ravel(), couplings[0],
                              0.0 if beta is None else beta.ravel(),
                              0.0 if tgt is None else tgt.ravel())
            mv, wc = prox_batch(query, warm=warm_cells)
            warm_cells = (mv, wc)
            m_new[1:] = mv.reshape((nt,) + grid.shape)
            w_new[:] = wc.reshape(nt, n, k).transpose(0, 2, 1).reshape(w.shape)
        else:
            for j in range(nt):
                query = ProxQuery(m_in[j + 1].ravel(), _w_cells(w_in[j], grid),
                                  tau, problem.q, problem.lam, v_slabs[j],
                                  couplings[j],
                                  0.0 if beta is None else beta[j],
                                  0.0 if tgt is None else tgt[j])
                mv, wc = prox_batch(query)
                m_new[j + 1] = mv.reshape(grid.shape)
                w_new[j] = _w_field(wc, grid)

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
            history.append({"iter": it, "residual": residual, "rel_change": rel_change})
            if callback is not None:
                callback(it, residual, rel_change)
            if max(residual, rel_change) <= tol:
                converged = True
                break
    return m, w, (sig_c, sig_p), it, converged, residual, rel_change, history


# ---------------------------------------------------------------------------
# smooth KKT pieces shared by the Newton polish and the outer adjoint


def _slab_views(problem, m, w, beta, tgt):
    """Uniform per-slab iteration over (m slab, w slab, cost, coupling, ...)."""
    grid = problem.grid
    if not problem.is_time_dependent:
        yield (m.ravel(), _w_cells(w, grid), problem.v.ravel(),
               problem.couplings()[0],
               None if beta is None else beta,
               None if tgt is None else tgt)
        return
    nt = problem.time_grid.n_steps
    couplings = problem.couplings()
    for k in range(nt):
        yield (m[k + 1].ravel(), _w_cells(w[k], grid), problem.slab_cost(k).ravel(),
               couplings[k],
               None if beta is None else beta[k],
               None if tgt is None else tgt[k])


def grad_cost(problem: MFGProblem, m, w, beta=None, tgt=None, m_floor=1e-12):
    """Gradient of the cell cost sum, flattened in solver layout.

    Zero-density cells get a zero kinetic gradient (their fluxes vanish at
    any cost-finite point, and the active-set logic pins them anyway).
    """
    grid = problem.grid
    q = problem.q
    met = problem.lam.T @ problem.lam
    gm_parts, gw_parts = [], []
    if problem.is_time_dependent:
        gm_parts.append(np.zeros(grid.n_cells))  # slab 0 carries no cost
    for mv, wc, v, coupling, b, t in _slab_views(problem, m, w, beta, tgt):
        mm = np.maximum(mv, m_floor)
        mw = wc @ met
        r2 = np.maximum(np.sum(wc * mw, axis=1), 0.0)
        rq2 = np.maximum(r2, 1e-20) ** (q / 2.0 - 1.0)
        gm = (1.0 - q) / q * rq2 * r2 * mm**-q + coupling.dF(mm) + v
        if b is not None:
            gm = gm + b * (mv - t)
        gw = (rq2 * mm ** (1.0 - q))[:, None] * mw
        gm_parts.append(gm)
        gw_parts.append(gw.T.ravel())  # component-major within the slab
    return np.concatenate(gm_parts), np.concatenate(gw_parts)


def hess_cost(problem: MFGProblem, m, w, beta=None, tgt=None, m_floor=1e-8,
              pinned_m=None, pinned_w=None):
    """Sparse Hessian of the cell cost sum in solver layout.

    Pinned coordinates (zero density cells, cone-active flux components)
    contribute identity rows/columns so KKT systems built from this matrix
    stay nonsingular; pass the pin masks used by the caller.
    """
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    q = problem.q
    met = problem.lam.T @ problem.lam
    n_slabs = problem.time_grid.n_steps if problem.is_time_dependent else 1

    hmm_all = []
    hmw_all = []  # per slab: (n, k)
    hww_all = []  # per slab: (n, k, k)
    for mv, wc, v, coupling, b, t in _slab_views(problem, m, w, beta, tgt):
        mm = np.maximum(mv, m_floor)
        mw = wc @ met
        r2 = np.maximum(np.sum(wc * mw, axis=1), 0.0)
        # floored radius keeps the flux block positive definite at w = 0
        # (exact for q = 2, vanishingly small bias otherwise)
        r2f = np.maximum(r2, 1e-20)
        rq2 = r2f ** (q / 2.0 - 1.0)
        rq4 = r2f ** (q / 2.0 - 2.0)
        hmm = (q - 1.0) * rq2 * r2 * mm ** (-q - 1.0) + coupling.d2F(mm)
        if b is not None:
            hmm = hmm + b
        hmw = (1.0 - q) * (rq2 * mm**-q)[:, None] * mw
        hww = mm[:, None, None] ** (1.0 - q) * (
            rq2[:, None, None] * met[None, :, :]
            + (q - 2.0) * rq4[:, None, None] * mw[:, :, None] * mw[:, None, :]
        )
        hmm_all.append(hmm)
        hmw_all.append(hmw)
        hww_all.append(hww)

    n_m = (n_slabs + 1) * n if problem.is_time_dependent else n
    n_w = n_slabs * k * n
    if pinned_m is None:
        pinned_m = np.zeros(n_m, dtype=bool)
    if pinned_w is None:
        pinned_w = np.zeros(n_w, dtype=bool)

    rows, cols, vals = [], [], []
    m_off0 = n if problem.is_time_dependent else 0  # slab-0 densities first
    for s in range(n_slabs):
        m_off = m_off0 + s * n
        w_off = n_m + s * k * n
        hmm, hmw, hww = hmm_all[s], hmw_all[s], hww_all[s]
        idx = np.arange(n)
        rows.append(m_off + idx)
        cols.append(m_off + idx)
        vals.append(hmm)
        for c in range(k):
            rows.append(m_off + idx)
            cols.append(w_off + c * n + idx)
            vals.append(hmw[:, c])
            rows.append(w_off + c * n + idx)
            cols.append(m_off + idx)
            vals.append(hmw[:, c])
            for d in range(k):
                rows.append(w_off + c * n + idx)
                cols.append(w_off + d * n + idx)
                vals.append(hww[:, c, d])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    pinned = np.concatenate([pinned_m, pinned_w])
    keep = ~(pinned[rows] | pinned[cols])
    h = sp.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(n_m + n_w, n_m + n_w)
    ).tocsr()
    h = h + sp.diags(pinned.astype(float))
    return h


def _flatten_state(problem, m, w):
    return np.concatenate([m.ravel(), w.ravel()])


def _unflatten_state(problem, y):
    grid = problem.grid
    if not problem.is_time_dependent:
        n = grid.n_cells
        m = y[:n].reshape(grid.shape)
        w = y[n:].reshape((grid.n_flux,) + grid.shape)
        return m, w
    nt = problem.time_grid.n_steps
    n = grid.n_cells
    n_m = (nt + 1) * n
    m = y[:n_m].reshape((nt + 1,) + grid.shape)
    w = y[n_m:].reshape((nt, grid.n_flux) + grid.shape)
    return m, w


def _flatten_sigma(problem, sigma):
    if not problem.is_time_dependent:
        return np.concatenate([sigma[0].ravel(), [float(sigma[1])]])
    return np.concatenate([sigma[0].ravel(), sigma[1].ravel()])


def _unflatten_sigma(problem, lam_vec):
    grid = problem.grid
    if not problem.is_time_dependent:
        n = grid.n_cells
        return lam_vec[:n].reshape(grid.shape), float(lam_vec[n])
    nt = problem.time_grid.n_steps
    n = grid.n_cells
    return (
        lam_vec[: nt * n].reshape((nt,) + grid.shape),
        lam_vec[nt * n :].reshape(grid.shape),
    )


def _grad_phi_vector(problem, m, w, beta, tgt):
    gm, gw = grad_cost(problem, m, w, beta, tgt)
    return np.concatenate([gm, gw])


_PIN_EPS = 1e-9


def assemble_kkt(problem, m, w, *, beta=None, tgt=None,
                 pinned_m=None, pinned_w=None, g_mat=None):
    """Saddle-point matrix of the smooth KKT system at the active set.

    Two sources of singularity are repaired exactly.  Constraint rows
    whose every column is pinned cannot move any free coordinate; they
    become identity rows on their multiplier.  Every free column of the
    stationary constraint sums to zero over the continuity rows, so each
    connected group of live continuity rows (rows sharing a free column)
    carries one kernel vector, its indicator; a gauge border per group
    pins the group mean of the continuity multiplier.  Callers append one
    zero per gauge to their right-hand side and discard the trailing
    entries of the solution.  Returns
    ``(matrix, n_y, n_rows, n_gauge, dead_rows)``.
    """
    if g_mat is None:
        g_mat = problem.constraint().sparse().tocsr()
    if pinned_m is None or pinned_w is None:
        pm, pw = _active_masks(problem, m, w)
        pinned_m = pm if pinned_m is None else pinned_m
        pinned_w = pw if pinned_w is None else pinned_w
    h = hess_cost(problem, m, w, beta, tgt, pinned_m=pinned_m, pinned_w=pinned_w)
    pinned = np.concatenate([pinned_m, pinned_w])
    sel = sp.diags((~pinned).astype(float))
    n_y = h.shape[0]
    n_rows = g_mat.shape[0]
    gt = (sel @ g_mat.T).tocsc()
    dead = np.asarray(np.abs(gt).sum(axis=0)).ravel() == 0.0
    if dead.any():
        live = sp.diags((~dead).astype(float))
        bot = sp.hstack([live @ g_mat, sp.diags(dead.astype(float))])
    else:
        bot = sp.hstack([g_mat, sp.csr_matrix((n_rows, n_rows))])
    kkt = sp.vstack([sp.hstack([h, gt]), bot])
    gauges = []
    if not problem.is_time_dependent:
        n = problem.grid.n_cells
        gt_abs = abs(gt[:, :n])
        adj = gt_abs.T @ gt_abs
        n_comp, label = csgraph.connected_components(adj, directed=False)
        for c in range(n_comp):
            rows = np.flatnonzero((label == c) & ~dead[:n])
            if rows.size:
                vec = np.zeros(n_y + n_rows)
                vec[n_y + rows] = 1.0 / rows.size
                gauges.append(vec)
    if gauges:
        cg = sp.csr_matrix(np.stack(gauges, axis=1))
        zero = sp.csr_matrix((len(gauges), len(gauges)))
        kkt = sp.vstack([sp.hstack([kkt, cg]), sp.hstack([cg.T, zero])])
    return kkt.tocsc(), n_y, n_rows, len(gauges), dead


def _active_masks(problem, m, w):
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    mv = m.ravel()
    if not problem.is_time_dependent:
        pinned_m = mv <= _PIN_EPS
        wc = w.reshape(k, n)
        pinned_w = np.abs(wc) <= _PIN_EPS
        pinned_w |= pinned_m[None, :]
        return pinned_m, pinned_w.ravel()
    nt = problem.time_grid.n_steps
    pinned_m = mv <= _PIN_EPS
    pinned_m[:n] = False  # slab 0 has no sign constraint in the cost
    wv = w.reshape(nt, k, n)
    pinned_w = np.abs(wv) <= _PIN_EPS
    for s in range(nt):
        pinned_w[s] |= pinned_m[(s + 1) * n : (s + 2) * n][None, :]
    return pinned_m, pinned_w.ravel()


def newton_polish(problem: MFGProblem, m, w, sigma, *, beta=None, tgt=None,
                  tol=1e-11, max_rounds=50):
    """Refine a near-solution to tight KKT residuals.

    Returns ``(m, w, sigma, rounds, ok)``; ``ok`` is False when the
    iteration failed to reach the tolerance (caller falls back to the
    primal-dual loop).  Flux components sitting on their cone face and
    zero-density cells are pinned; pins are released when the KKT
    pressure points inward.
    """
    op = problem.constraint()
    g_mat = op.sparse().tocsr()
    rhs_parts = op.rhs()
    if problem.is_time_dependent:
        b_vec = np.concatenate([rhs_parts[0].ravel(), rhs_parts[1].ravel()])
    else:
        b_vec = np.concatenate([rhs_parts[0].ravel(), [rhs_parts[1]]])

    y = _flatten_state(problem, m, w)
    lam_vec = _flatten_sigma(problem, sigma)
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux

    pinned_m, pinned_w = _active_masks(problem, *_unflatten_state(problem, y))
    y[np.concatenate([pinned_m, pinned_w])] = 0.0
    even = _even_mask(problem)
    rel_tol = max(10.0 * tol, 1e-10)

    # rounding floor of the KKT residual: a stiff fidelity weight makes the
    # gradient an exact cancellation of large addends, so the achievable
    # residual scales with their magnitude, not with tol
    eps32 = 32.0 * np.finfo(float).eps
    gabs = abs(g_mat)
    if beta is None:
        beta_flat = tgt_flat = None
    elif problem.is_time_dependent:
        beta_flat = np.concatenate([np.zeros(n), np.asarray(beta, float).ravel()])
        tgt_flat = np.concatenate([np.zeros(n), np.asarray(tgt, float).ravel()])
    else:
        beta_flat = np.broadcast_to(np.asarray(beta, float).ravel(), (n,))
        tgt_flat = np.broadcast_to(np.asarray(tgt, float).ravel(), (n,))

    for round_ in range(1, max_rounds + 1):
        mm, ww = _unflatten_state(problem, y)
        grad_phi = _grad_phi_vector(problem, mm, ww, beta, tgt)
        kkt_y = grad_phi + g_mat.T @ lam_vec
        kkt_lam = g_mat @ y - b_vec

        pinned = np.concatenate([pinned_m, pinned_w])
        n_m = len(pinned_m)
        res_probe = max(
            float(np.max(np.abs(np.where(pinned, 0.0, kkt_y)))),
            float(np.max(np.abs(kkt_lam))),
        )
        # release pins whose pressure points into the feasible side; far
        # from the solution only strongly pressured pins come loose
        thresh = max(rel_tol, 1e-3 * res_probe)
        press = kkt_y
        rel_m = pinned_m & (press[:n_m] < -thresh)
        w_press = press[n_m:]
        rel_w = pinned_w & np.where(even, w_press < -thresh, w_press > thresh)
        # fluxes of a zero-density cell stay pinned with the cell
        rel_w &= ~_expand_m_pins(problem, pinned_m & ~rel_m)
        if np.any(rel_m) or np.any(rel_w):
            pinned_m = pinned_m & ~rel_m
            pinned_w = pinned_w & ~rel_w
            pinned = np.concatenate([pinned_m, pinned_w])

        res_y = np.where(pinned, 0.0, kkt_y)
        res = max(float(np.max(np.abs(res_y))), float(np.max(np.abs(kkt_lam))))
        scale_y = 1.0 + np.abs(grad_phi) + gabs.T @ np.abs(lam_vec)
        if beta_flat is not None:
            scale_y[:n_m] += beta_flat * np.maximum(np.abs(y[:n_m]), np.abs(tgt_flat))
        scale_lam = 1.0 + gabs @ np.abs(y) + np.abs(b_vec)
        done_y = np.all(np.abs(res_y) <= np.maximum(tol, eps32 * scale_y))
        done_lam = np.all(np.abs(kkt_lam) <= np.maximum(tol, eps32 * scale_lam))
        if done_y and done_lam:
            msol, wsol = _unflatten_state(problem, y)
            return msol, wsol, _unflatten_sigma(problem, lam_vec), round_, True

        # solve, re-pinning any coordinate sitting on its boundary whose
        # step points outward (otherwise the feasibility cap stalls at 0)
        dy = dlam = None
        for _ in range(6):
            kkt, n_y, n_rows, n_gauge, dead = assemble_kkt(
                problem, mm, ww, beta=beta, tgt=tgt,
                pinned_m=pinned_m, pinned_w=pinned_w, g_mat=g_mat,
            )
            res_y = np.where(pinned, 0.0, kkt_y)
            # dead rows park their multiplier and let it decay to zero so
            # it stops exerting phantom pressure on pinned fluxes
            res_lam = np.where(dead, lam_vec, kkt_lam)
            rhs = -np.concatenate([np.where(pinned, y, res_y), res_lam])
            if n_gauge:
                rhs = np.concatenate([rhs, np.zeros(n_gauge)])
            try:
                sol = spla.splu(kkt).solve(rhs)
            except RuntimeError:
                sol = None
            if sol is None or not np.all(np.isfinite(sol)):
                return *_unflatten_state(problem, y), _unflatten_sigma(problem, lam_vec), round_, False
            dy = sol[:n_y]
            dlam = sol[n_y : n_y + n_rows]
            free = ~pinned
            out_m = free[:n_m] & (y[:n_m] == 0.0) & (dy[:n_m] < 0)
            if problem.is_time_dependent:
                out_m[: problem.grid.n_cells] = False
            dyw = dy[n_m:]
            out_w = free[n_m:] & (y[n_m:] == 0.0)
            out_w &= np.where(even, dyw < 0, dyw > 0)
            if not (np.any(out_m) or np.any(out_w)):
                break
            pinned_m = pinned_m | out_m
            pinned_w = pinned_w | out_w
            pinned_w = pinned_w | _expand_m_pins(problem, pinned_m)
            pinned = np.concatenate([pinned_m, pinned_w])
        else:
            return *_unflatten_state(problem, y), _unflatten_sigma(problem, lam_vec), round_, False

        # feasibility cap: free densities stay nonnegative, free flux
        # components stay inside their cone half-line
        t = 1.0
        free = ~pinned
        ym = y[:n_m]
        dym = dy[:n_m]
        mask = free[:n_m] & (dym < 0) & (ym + dym < 0)
        if problem.is_time_dependent:
            mask[:n] = False  # slab 0 is unconstrained
        if np.any(mask):
            t = min(t, float(np.min(ym[mask] / -dym[mask])))
        yw = y[n_m:]
        dyw = dy[n_m:]
        cross = free[n_m:] & np.where(even, yw + dyw < 0, yw + dyw > 0) & (dyw != 0)
        if np.any(cross):
            t = min(t, float(np.min(yw[cross] / -dyw[cross])))
        t = max(t, 0.0)

        y = y + t * dy
        lam_vec = lam_vec + t * dlam
        # coordinates that reached the boundary get pinned exactly
        ym = y[:n_m]
        hit_m = free[:n_m] & (ym <= _PIN_EPS * 1e-2)
        if problem.is_time_dependent:
            hit_m[:n] = False
        if np.any(hit_m):
            ym[hit_m] = 0.0
            pinned_m = pinned_m | hit_m
        yw = y[n_m:]
        hit_w = free[n_m:] & (np.where(even, yw, -yw) <= _PIN_EPS * 1e-2)
        if np.any(hit_w):
            yw[hit_w] = 0.0
            pinned_w = pinned_w | hit_w
        # pinned density cells force their fluxes to zero as well
        pm_cells = pinned_m.copy()
        pinned_w = pinned_w | _expand_m_pins(problem, pm_cells)
        y = np.concatenate([ym, yw])
        y[np.concatenate([pinned_m, pinned_w])] = 0.0

    msol, wsol = _unflatten_state(problem, y)
    return msol, wsol, _unflatten_sigma(problem, lam_vec), max_rounds, False


def _even_mask(problem):
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    comp_even = (np.arange(k) % 2 == 0).repeat(n)
    if not problem.is_time_dependent:
        return comp_even
    nt = problem.time_grid.n_steps
    return np.tile(comp_even, nt)


def _expand_m_pins(problem, pinned_m):
    grid = problem.grid
    n = grid.n_cells
    k = grid.n_flux
    if not problem.is_time_dependent:
        return np.tile(pinned_m, k)
    nt = problem.time_grid.n_steps
    out = np.zeros(nt * k * n, dtype=bool)
    for s in range(nt):
        slab = pinned_m[(s + 1) * n : (s + 2) * n]
        out[s * k * n : (s + 1) * k * n] = np.tile(slab, k)
    return out


class _Warm:
    def __init__(self, m, w, sigma):
        self.m, self.w, self.sigma = m, w, sigma


def _solve(problem: MFGProblem, *, tol=1e-6, max_iters=200_000, check_every=100,
           tau=None, gamma_cp=None, theta=1.0, warm=None, polish=True,
           method="auto", fidelity_weight=None, fidelity_target=None,
           polish_tol=1e-11, polish_every=1000, callback=None) -> SaddleState:
    op = problem.constraint()
    if tau is None or gamma_cp is None:
        norm = operator_norm(op)
        step = 0.95 / norm
        tau = step if tau is None else tau
        gamma_cp = step if gamma_cp is None else gamma_cp
    beta, tgt = _normalize_fidelity(problem, fidelity_weight, fidelity_target)
    if method == "cp":
        polish = False

    def try_polish(state, rounds, iters_so_far, hist):
        msol, wsol, sig, used, ok = newton_polish(
            problem, state.m, state.w, state.sigma,
            beta=beta, tgt=tgt, tol=polish_tol, max_rounds=rounds,
        )
        if not ok:
            return None
        residual = op.residual(msol, wsol)
        if residual > tol:
            return None
        return SaddleState(
            m=msol, w=wsol, sigma=sig, iterations=iters_so_far, converged=True,
            residual=residual, rel_change=0.0,
            objective=objective_value(problem, msol, wsol, beta, tgt),
            method="polish" if iters_so_far == 0 else "cp+polish",
            history=hist, polish_rounds=used,
        )

    if polish and warm is not None and method in ("auto", "polish"):
        state = try_polish(warm, 15, 0, [])
        if state is not None:
            return state

    runner = _cp_time_dependent if problem.is_time_dependent else _cp_stationary
    current = warm
    total = 0
    history = []
    converged = False
    residual = np.inf
    rel_change = np.inf
    gap = polish_every
    while total < max_iters:
        chunk = max_iters - total
        if polish and polish_every:
            chunk = min(chunk, gap)
        m, w, sigma, iters, converged, residual, rel_change, hist = runner(
            problem, op, tau=tau, gamma_cp=gamma_cp, theta=theta, tol=tol,
            max_iters=chunk, check_every=check_every, warm=current,
            beta=beta, tgt=tgt, callback=callback,
        )
        history.extend(
            {**h, "iter": h["iter"] + total} for h in hist
        )
        total += iters
        current = _Warm(m, w, sigma)
        if converged:
            break
        if polish and total < max_iters:
            state = try_polish(current, 12, total, history)
            if state is not None:
                return state
            gap *= 2  # polish attempts back off while the iterate is far out

    rounds = 0
    method_used = "cp"
    if polish:
        state = try_polish(current, 50, total, history)
        if state is not None:
            return state
    return SaddleState(
        m=current.m, w=current.w, sigma=current.sigma, iterations=total,
        converged=converged, residual=residual, rel_change=rel_change,
        objective=objective_value(problem, current.m, current.w, beta, tgt),
        method=method_used, history=history, polish_rounds=rounds,
    )


def solve_stationary(problem, **opts):
    """Solve a stationary problem; returns (density, flux, state).

    See the module docstring for the scheme.  The state carries the same
    arrays along with convergence diagnostics.
    """
    if problem.is_time_dependent:
        raise ValueError("problem has a time grid; use solve_time_dependent")
    state = _solve(problem, **opts)
    return state.m, state.w, state


def solve_time_dependent(problem, **opts):
    """Solve a time-discretized problem; returns (density, flux, state)."""
    if not problem.is_time_dependent:
        raise ValueError("problem has no time grid; use solve_stationary")
    state = _solve(problem, **opts)
    return state.m, state.w, state
