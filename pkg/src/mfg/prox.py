"""Exact per-cell proximal maps of the transport cost.

Each cell of the primal-dual iteration solves

    min_{p >= 0, w in K}  tau*[ |L w|^q / (q p^(q-1)) + Ft(p) ]
                          + (p - mb)^2/2 + |w - wb|^2/2

where ``Ft(p) = F(p) + v*p + beta/2*(p - target)^2`` folds the coupling,
the spatial cost, and an optional quadratic data fidelity, and K is the
sign cone of the one-sided flux components.  The kinetic term is the
perspective of |L w|^q/q, so the objective is convex and (because of the
quadratic proximity terms) 1-strongly convex: an objective gap eps
certifies a point error sqrt(2*eps).

Two solvers:

* scalar path (L^T L = c*I): the optimal flux is an exact scalar multiple
  of the cone projection of wb, and the density solves a monotone scalar
  root problem written in positive powers of e(p) = p + tau*Ft'(p) - mb so
  that exponents stay safe for q < 2;
* general path: damped active-set Newton on the (1 + 2*dim)-variable cell
  problem, batched across cells, with a per-cell L-BFGS-B fallback and
  explicit comparison against the w = 0 and origin candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ProxQuery", "ProxError", "prox_cell", "prox_batch", "prox_residual"]

_MAX_ROOT_ITERS = 200
_NEWTON_ROUNDS = 60
_CURVATURE_FLOOR = 0.01


class ProxError(RuntimeError):
    """Per-cell proximal solve failure; carries the offending cell data."""

    def __init__(self, message: str, data: dict | None = None):
        super().__init__(message if data is None else f"{message}; cells={data}")
        self.data = data or {}


@dataclass
class ProxQuery:
    """Batched inputs of the per-cell proximal map.

    m_bar : (n,) proximity centers for the density.
    w_bar : (n, 2*dim) proximity centers for the flux.
    tau : prox step (the tau multiplying the cost inside the objective).
    q : kinetic exponent, > 1.
    lam : metric matrix, shape (2*dim, 2*dim), shared by all cells.
    v : (n,) or scalar linear cost per cell.
    coupling : object with vectorized F(m), dF(m), d2F(m).
    fidelity_weight, fidelity_target : optional per-cell quadratic data term
        beta/2*(m - target)^2 added to the cost (used by the saddle solver).
    """

    m_bar: np.ndarray
    w_bar: np.ndarray
    tau: float
    q: float
    lam: np.ndarray
    v: np.ndarray | float
    coupling: object
    fidelity_weight: np.ndarray | float = 0.0
    fidelity_target: np.ndarray | float = 0.0

    def __post_init__(self):
        self.m_bar = np.atleast_1d(np.asarray(self.m_bar, dtype=float))
        self.w_bar = np.asarray(self.w_bar, dtype=float)
        if self.w_bar.ndim == 1:
            self.w_bar = self.w_bar[None, :]
        self.lam = np.asarray(self.lam, dtype=float)
        if self.tau <= 0:
            raise ValueError("prox step must be positive")
        if self.q <= 1:
            raise ValueError("kinetic exponent must exceed 1")
        n, k = self.w_bar.shape
        if self.m_bar.shape != (n,) or self.lam.shape != (k, k):
            raise ValueError("inconsistent prox query shapes")

    @property
    def n_cells(self) -> int:
        return self.m_bar.shape[0]

    def ft_value(self, p: np.ndarray) -> np.ndarray:
        out = self.coupling.F(p) + self.v * p
        beta = self.fidelity_weight
        if np.any(np.asarray(beta) != 0):
            out = out + 0.5 * beta * (p - self.fidelity_target) ** 2
        return out

    def ft_d1(self, p: np.ndarray) -> np.ndarray:
        out = self.coupling.dF(p) + self.v + np.zeros_like(p)
        beta = self.fidelity_weight
        if np.any(np.asarray(beta) != 0):
            out = out + beta * (p - self.fidelity_target)
        return out

    def ft_d2(self, p: np.ndarray) -> np.ndarray:
        return self.coupling.d2F(p) + self.fidelity_weight + np.zeros_like(p)


def _project_cone_cells(w: np.ndarray) -> np.ndarray:
    out = np.empty_like(w)
    out[:, 0::2] = np.maximum(w[:, 0::2], 0.0)
    out[:, 1::2] = np.minimum(w[:, 1::2], 0.0)
    return out


def _scalar_metric(lam: np.ndarray) -> float | None:
    """Return c when lam^T lam = c*I (within roundoff), else None."""
    m = lam.T @ lam
    c = float(np.trace(m)) / m.shape[0]
    if c <= 0:
        return None
    if np.max(np.abs(m - c * np.eye(m.shape[0]))) <= 1e-12 * c:
        return c
    return None


def _curvature_guard(query: ProxQuery, p: np.ndarray):
    """The scalar root is monotone only if 1 + tau*Ft'' stays positive."""
    curv = 1.0 + query.tau * query.ft_d2(np.maximum(p, 1e-300))
    bad = curv < _CURVATURE_FLOOR
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ProxError(
            "coupling curvature makes the prox objective nonconvex "
            f"(1 + tau*Ft'' = {curv[i]:.3e} at m = {p[i]:.6g}); "
            "the coupling surrogate is too concave on the visited range"
        )


def _root_increasing(f, lo, hi, fprime=None):
    """Vector root of an increasing function with f(lo) <= 0 <= f(hi).

    Safeguarded Newton.  Candidates leaving the bracket step 10% inward
    from the violated end instead (roots often hug an end, where plain
    bisection grinds and clamping onto the end would sit on a derivative
    singularity).  A cell exits on a tiny bracket, or on a tiny in-bracket
    Newton step whose function value is also collapsing; the value check
    matters because piecewise-flat objectives pair huge derivatives with
    non-vanishing residuals, which fakes a small step.  Every third round
    bisects unconditionally so the bracket shrinkage is guaranteed.
    """
    lo = lo.copy()
    hi = hi.copy()
    p = 0.5 * (lo + hi)
    val_prev = np.full(p.shape, np.inf)
    for it in range(_MAX_ROOT_ITERS):
        val = f(p)
        pos = val > 0
        hi = np.where(pos, p, hi)
        lo = np.where(pos, lo, p)
        width = hi - lo
        scale = 1e-15 * (1.0 + np.abs(p))
        conv = width <= scale
        if fprime is None:
            if np.all(conv):
                break
            p = np.where(conv, p, 0.5 * (lo + hi))
            continue
        dv = fprime(p)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            cand = p - val / dv
        inside = np.isfinite(cand) & (cand > lo) & (cand < hi)
        shrinking = np.abs(val) <= 0.3 * val_prev
        conv |= inside & shrinking & (np.abs(cand - p) <= scale)
        if np.all(conv):
            break
        val_prev = np.abs(val)
        if it % 3 == 2:
            fresh = 0.5 * (lo + hi)
        else:
            below = np.isfinite(cand) & (cand <= lo)
            above = np.isfinite(cand) & (cand >= hi)
            fresh = np.where(inside, cand, 0.5 * (lo + hi))
            fresh = np.where(below, lo + 0.1 * width, fresh)
            fresh = np.where(above, hi - 0.1 * width, fresh)
        p = np.where(conv, p, fresh)
    else:
        bad = (hi - lo) > 1e-12 * (1.0 + np.abs(p))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ProxError(
                "scalar root solve did not converge",
                {"lo": lo[i], "hi": hi[i], "residual": f(p)[i]},
            )
    return p


def _density_only_root(query: ProxQuery, idx: np.ndarray) -> np.ndarray:
    """Root of e(p) = p + tau*Ft'(p) - m_bar on the given cells (w = 0)."""
    tau = query.tau
    m_bar = query.m_bar[idx]
    v = np.broadcast_to(np.asarray(query.v, dtype=float), query.m_bar.shape)[idx]
    beta = np.broadcast_to(np.asarray(query.fidelity_weight, dtype=float), query.m_bar.shape)[idx]
    tgt = np.broadcast_to(np.asarray(query.fidelity_target, dtype=float), query.m_bar.shape)[idx]

    def e(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = p + tau * (query.coupling.dF(p) + v + beta * (p - tgt)) - m_bar
        return val

    def e_prime(p):
        return 1.0 + tau * (query.coupling.d2F(p) + beta)

    lo = np.full(m_bar.shape, 1e-300)
    at_zero = e(lo) >= 0
    hi = np.maximum(np.maximum(m_bar, 1.0), lo * 2)
    for _ in range(400):
        need = e(hi) < 0
        if not np.any(need):
            break
        hi = np.where(need, 2.0 * hi, hi)
    else:
        raise ProxError("could not bracket the density root", {"m_bar": m_bar})
    root = _root_increasing(e, lo, hi, e_prime)
    _curvature_guard_sub(query, root, v, beta)
    return np.where(at_zero, 0.0, root)


def _curvature_guard_sub(query, p, v, beta):
    curv = 1.0 + query.tau * (query.coupling.d2F(np.maximum(p, 1e-300)) + beta)
    bad = curv < _CURVATURE_FLOOR
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ProxError(
            "coupling curvature makes the prox objective nonconvex "
            f"(1 + tau*Ft'' = {curv[i]:.3e} at m = {p[i]:.6g})"
        )


def _scalar_path(query: ProxQuery, c: float):
    """Exact prox when lam^T lam = c*I.

    With gw = tau * c^(q/2), qc = q/(q-1), R = |P_K(wb)| and
    e(p) = p + tau*Ft'(p) - mb, the optimal density solves

        T(p) = e^(1/q) * p + C * e^((q-1)/q) - (gw/qc)^(1/q) * R = 0,
        C = gw^(2/q) * qc^(1 - 2/q),

    and the optimal flux is alpha * P_K(wb) with
    alpha = p / (p + C * e^(1 - 2/q)).  Only positive powers of e are
    evaluated so the formulas remain stable for q < 2.  The origin wins
    exactly when e(0) >= R^qc * gw^(1-qc) / qc.
    """
    q = query.q
    tau = query.tau
    qc = q / (q - 1.0)
    gw = tau * c ** (q / 2.0)
    big_c = gw ** (2.0 / q) * qc ** (1.0 - 2.0 / q)
    rhs_coef = (gw / qc) ** (1.0 / q)

    n = query.n_cells
    w_proj = _project_cone_cells(query.w_bar)
    r = np.sqrt(np.sum(w_proj * w_proj, axis=1))
    m_out = np.zeros(n)
    w_out = np.zeros_like(query.w_bar)

    v = np.broadcast_to(np.asarray(query.v, dtype=float), (n,))
    beta = np.broadcast_to(np.asarray(query.fidelity_weight, dtype=float), (n,))
    tgt = np.broadcast_to(np.asarray(query.fidelity_target, dtype=float), (n,))

    with np.errstate(divide="ignore", invalid="ignore"):
        df0 = query.coupling.dF(np.zeros(n))
    e0 = tau * (df0 + v + beta * (0.0 - tgt)) - query.m_bar

    # cells whose cone projection vanishes reduce to the density-only root
    no_flux = r <= 0.0
    if np.any(no_flux):
        idx = np.where(no_flux)[0]
        m_out[idx] = _density_only_root(query, idx)

    active = ~no_flux
    if np.any(active):
        thresh = (r ** qc) * gw ** (1.0 - qc) / qc
        at_origin = active & (e0 >= thresh)
        solve = active & ~at_origin
        if np.any(solve):
            idx = np.where(solve)[0]
            m_bar = query.m_bar[idx]
            vv, bb, tt = v[idx], beta[idx], tgt[idx]
            rr = r[idx]

            def e_of(p):
                with np.errstate(divide="ignore", invalid="ignore"):
                    return p + tau * (query.coupling.dF(p) + vv + bb * (p - tt)) - m_bar

            def e_prime(p):
                return 1.0 + tau * (query.coupling.d2F(p) + bb)

            def t_of(p):
                e = np.maximum(e_of(p), 0.0)
                return e ** (1.0 / q) * p + big_c * e ** ((q - 1.0) / q) - rhs_coef * rr

            def t_prime(p):
                e = np.maximum(e_of(p), 1e-300)
                ep = e_prime(p)
                return (
                    e ** (1.0 / q)
                    + p * (1.0 / q) * e ** (1.0 / q - 1.0) * ep
                    + big_c * ((q - 1.0) / q) * e ** (-1.0 / q) * ep
                )

            # lower end: the density-only root (where e = 0, T < 0)
            lo = _density_only_root(query, idx)
            hi = np.maximum(np.maximum(lo, m_bar), 1.0)
            for _ in range(400):
                need = t_of(hi) < 0
                if not np.any(need):
                    break
                hi = np.where(need, 2.0 * hi, hi)
            else:
                raise ProxError("could not bracket the kinetic root", {"cells": idx})
            p = _root_increasing(t_of, lo, hi, t_prime)
            _curvature_guard_sub(query, p, vv, bb)

            e = np.maximum(e_of(p), 1e-300)
            if q >= 2.0:
                alpha = p / (p + big_c * e ** (1.0 - 2.0 / q))
            else:
                pe = p * e ** (2.0 / q - 1.0)
                alpha = pe / (pe + big_c)
            m_out[idx] = p
            w_out[idx] = alpha[:, None] * w_proj[idx]
    return m_out, w_out


def _phi_terms(query: ProxQuery, p, w, mask=None):
    """Objective value on (a subset of) the batch; p must be positive."""
    q = query.q
    mw = w @ (query.lam.T @ query.lam)
    r2 = np.sum(w * mw, axis=1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        kin = np.where(r2 > 0, r2 ** (q / 2.0) * p ** (1.0 - q) / q, 0.0)
    m_bar = query.m_bar if mask is None else query.m_bar[mask]
    w_bar = query.w_bar if mask is None else query.w_bar[mask]
    prox = 0.5 * (p - m_bar) ** 2 + 0.5 * np.sum((w - w_bar) ** 2, axis=1)
    if mask is None:
        ft = query.ft_value(p)
    else:
        v = np.broadcast_to(np.asarray(query.v, dtype=float), query.m_bar.shape)[mask]
        beta = np.broadcast_to(
            np.asarray(query.fidelity_weight, dtype=float), query.m_bar.shape
        )[mask]
        tgt = np.broadcast_to(
            np.asarray(query.fidelity_target, dtype=float), query.m_bar.shape
        )[mask]
        ft = query.coupling.F(p) + v * p + 0.5 * beta * (p - tgt) ** 2
    return query.tau * (kin + ft) + prox


def _general_path(query: ProxQuery, warm=None):
    """Active-set damped Newton for a general (non-isometry) metric."""
    q = query.q
    tau = query.tau
    met = query.lam.T @ query.lam
    n, k = query.w_bar.shape

    v = np.broadcast_to(np.asarray(query.v, dtype=float), (n,)).astype(float)
    beta = np.broadcast_to(np.asarray(query.fidelity_weight, dtype=float), (n,)).astype(float)
    tgt = np.broadcast_to(np.asarray(query.fidelity_target, dtype=float), (n,)).astype(float)

    w_proj = _project_cone_cells(query.w_bar)
    r_proj = np.sqrt(np.sum(w_proj * w_proj, axis=1))

    # candidate A: no flux, density-only root
    p_a = _density_only_root(query, np.arange(n))
    phi_a = _phi_terms(query, np.maximum(p_a, 1e-300), np.zeros((n, k)))
    phi_a = np.where(p_a > 0, phi_a, _phi_origin(query, v, beta, tgt))

    best_p = np.where(p_a > 0, p_a, 0.0)
    best_w = np.zeros((n, k))
    best_phi = phi_a

    run = r_proj > 0
    if np.any(run):
        idx = np.where(run)[0]
        p, w = _newton_cells(query, met, idx, v[idx], beta[idx], tgt[idx], warm)
        ok = p > 0
        if np.any(ok):
            sub = idx[ok]
            phi = _phi_terms(query, p[ok], w[ok], mask=sub)
            better = phi < best_phi[sub] - 0.0
            upd = sub[better]
            best_p[upd] = p[ok][better]
            best_w[upd] = w[ok][better]
            best_phi[upd] = phi[better]
    return best_p, best_w


def _phi_origin(query: ProxQuery, v, beta, tgt):
    f0 = query.coupling.F(np.zeros(query.n_cells))
    ft0 = f0 + 0.5 * beta * tgt**2
    return (
        query.tau * ft0
        + 0.5 * query.m_bar**2
        + 0.5 * np.sum(query.w_bar**2, axis=1)
    )


def _newton_cells(query: ProxQuery, met, idx, v, beta, tgt, warm):
    """Damped Newton with cone active sets on the selected cells.

    Returns (p, w) with p = -1 flagging cells that failed to converge and
    were not rescued by the fallback (the caller keeps candidate A then).
    """
    q = query.q
    tau = query.tau
    n = len(idx)
    k = query.w_bar.shape[1]
    m_bar = query.m_bar[idx]
    w_bar = query.w_bar[idx]
    even = np.arange(k) % 2 == 0

    if warm is not None:
        p = np.maximum(np.asarray(warm[0], dtype=float)[idx].copy(), 1e-10)
        w = _project_cone_cells(np.asarray(warm[1], dtype=float)[idx].copy())
    else:
        # initialize from the isotropic solution at the mean Rayleigh
        # quotient of the metric along the projected flux directions
        w0 = _project_cone_cells(w_bar)
        ray = np.sum((w0 @ met) * w0, axis=1) / np.maximum(np.sum(w0 * w0, axis=1), 1e-300)
        c_init = float(np.mean(np.maximum(ray, 1e-12)))
        sub = ProxQuery(
            m_bar, w_bar, tau, q, np.sqrt(c_init) * np.eye(k), v, query.coupling, beta, tgt
        )
        p, w = _scalar_path(sub, c_init)
        p = np.maximum(p, 1e-10)
    pinned = w == 0.0

    def grad(p, w):
        mw = w @ met
        r2 = np.maximum(np.sum(w * mw, axis=1), 0.0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rq2 = np.where(r2 > 0, r2 ** (q / 2.0 - 1.0), 0.0)  # r^(q-2)
        gp = (
            tau * ((1.0 - q) / q * rq2 * r2 * p**-q + query.coupling.dF(p) + v + beta * (p - tgt))
            + p
            - m_bar
        )
        gw = tau * (rq2 * p ** (1.0 - q))[:, None] * mw + (w - w_bar)
        return gp, gw, mw, r2, rq2

    scale = 1.0 + np.abs(m_bar) + np.sqrt(np.sum(w_bar * w_bar, axis=1))
    tol = 1e-11 * scale
    done = np.zeros(n, dtype=bool)

    for _ in range(_NEWTON_ROUNDS):
        gp, gw, mw, r2, rq2 = grad(p, w)
        # pinned components: keep only if the sign condition holds
        release = pinned & np.where(even[None, :], gw < -tol[:, None], gw > tol[:, None])
        pinned &= ~release
        gw_eff = np.where(pinned, 0.0, gw)
        res = np.abs(gp) + np.sum(np.abs(gw_eff), axis=1)
        done = res <= tol
        if np.all(done):
            break
        act = ~done
        a = np.where(act)[0]
        hp = tau * (
            (q - 1.0) * rq2[a] * r2[a] * p[a] ** (-q - 1.0)
            + query.coupling.d2F(p[a])
            + beta[a]
        ) + 1.0
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rq4 = np.where(r2[a] > 0, r2[a] ** (q / 2.0 - 2.0), 0.0)  # r^(q-4)
        hw = tau * p[a][:, None, None] ** (1.0 - q) * (
            rq2[a][:, None, None] * met[None, :, :]
            + (q - 2.0) * rq4[:, None, None] * mw[a][:, :, None] * mw[a][:, None, :]
        )
        hw[:, np.arange(k), np.arange(k)] += 1.0
        hpw = tau * (1.0 - q) * (rq2[a] * p[a] ** (-q))[:, None] * mw[a]

        big = np.zeros((len(a), k + 1, k + 1))
        big[:, 0, 0] = hp
        big[:, 0, 1:] = hpw
        big[:, 1:, 0] = hpw
        big[:, 1:, 1:] = hw
        rhs = np.concatenate([gp[a][:, None], gw[a]], axis=1)
        pin_a = pinned[a]
        # pinned rows/cols become identity so shapes stay uniform
        for c in range(k):
            mask = pin_a[:, c]
            if np.any(mask):
                big[mask, c + 1, :] = 0.0
                big[mask, :, c + 1] = 0.0
                big[mask, c + 1, c + 1] = 1.0
                rhs[mask, c + 1] = 0.0
        try:
            step = np.linalg.solve(big, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(bb, rr, rcond=None)[0] for bb, rr in zip(big, rhs)])
        dp = -step[:, 0]
        dw = -step[:, 1:]
        dw[pin_a] = 0.0
        # a just-released component whose Newton direction points out of
        # the cone would stall the line search: re-pin it for this round
        outward = (w[a] == 0.0) & np.where(even[None, :], dw < 0, dw > 0)
        dw[outward] = 0.0
        pinned[np.ix_(a, np.arange(k))] |= outward

        # largest feasible step: keep p positive, w inside its cone
        tmax = np.ones(len(a))
        neg = dp < 0
        tmax = np.where(neg, np.minimum(tmax, -0.95 * p[a] / np.where(neg, dp, -1.0)), tmax)
        for c in range(k):
            wc, dc = w[a, c], dw[:, c]
            if even[c]:
                hit = dc < 0
                lim = np.where(hit, wc / np.maximum(-dc, 1e-300), np.inf)
            else:
                hit = dc > 0
                lim = np.where(hit, -wc / np.maximum(dc, 1e-300), np.inf)
            tmax = np.minimum(tmax, np.where(hit, lim, np.inf))
        tmax = np.minimum(tmax, 1.0)

        phi0 = _phi_terms(query, p[a], w[a], mask=idx[a])
        slope = dp * gp[a] + np.sum(dw * gw_eff[a], axis=1)
        t = tmax.copy()
        accepted = np.zeros(len(a), dtype=bool)
        p_new, w_new = p[a].copy(), w[a].copy()
        for _ls in range(30):
            trial_p = p[a] + t * dp
            trial_w = w[a] + t[:, None] * dw
            trial_w = _project_cone_cells(trial_w)
            phi1 = _phi_terms(query, np.maximum(trial_p, 1e-300), trial_w, mask=idx[a])
            good = (~accepted) & (phi1 <= phi0 + 1e-4 * t * slope)
            p_new[good] = trial_p[good]
            w_new[good] = trial_w[good]
            accepted |= good
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        p[a] = np.maximum(p_new, 1e-300)
        w[a] = w_new
        newly = np.abs(w[a]) <= 0.0
        pinned[a] |= newly
        w[a][newly] = 0.0

    if not np.all(done):
        bad = np.where(~done)[0]
        p, w = _fallback_lbfgs(query, met, idx, bad, v, beta, tgt, p, w, tol)
    return p, w


def _fallback_lbfgs(query, met, idx, bad, v, beta, tgt, p, w, tol):
    from scipy.optimize import minimize

    q = query.q
    tau = query.tau
    k = query.w_bar.shape[1]
    for j in bad:
        cell = idx[j]
        mb = query.m_bar[cell]
        wb = query.w_bar[cell]

        def obj(x):
            pp, ww = x[0], x[1:]
            r2 = float(ww @ met @ ww)
            kin = (r2 ** (q / 2.0)) * pp ** (1.0 - q) / q if r2 > 0 else 0.0
            ft = float(query.coupling.F(np.array([pp]))[0]) + v[j] * pp
            ft += 0.5 * beta[j] * (pp - tgt[j]) ** 2
            return tau * (kin + ft) + 0.5 * (pp - mb) ** 2 + 0.5 * float((ww - wb) @ (ww - wb))

        bounds = [(1e-12, None)]
        for c in range(k):
            bounds.append((0.0, None) if c % 2 == 0 else (None, 0.0))
        x0 = np.concatenate([[max(p[j], 1e-6)], w[j]])
        res = minimize(obj, x0, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 500, "ftol": 1e-18, "gtol": 1e-12})
        x = res.x
        p[j] = x[0]
        w[j] = _project_cone_cells(x[1:][None, :])[0]
    return p, w


def prox_batch(query: ProxQuery, warm=None):
    """Solve the per-cell prox for every cell in the query.

    Returns ``(m, w)`` with shapes ``(n,)`` and ``(n, 2*dim)``.
    """
    c = _scalar_metric(query.lam)
    if c is not None:
        return _scalar_path(query, c)
    return _general_path(query, warm=warm)


def prox_residual(query: ProxQuery, m: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Scale-normalized optimality residual of a candidate prox output."""
    n = query.n_cells
    q = query.q
    tau = query.tau
    met = query.lam.T @ query.lam
    m = np.atleast_1d(np.asarray(m, dtype=float))
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    v = np.broadcast_to(np.asarray(query.v, dtype=float), (n,))
    beta = np.broadcast_to(np.asarray(query.fidelity_weight, dtype=float), (n,))
    tgt = np.broadcast_to(np.asarray(query.fidelity_target, dtype=float), (n,))
    scale = 1.0 + np.abs(query.m_bar) + np.sqrt(np.sum(query.w_bar**2, axis=1))
    res = np.zeros(n)
    pos = m > 0
    if np.any(pos):
        mw = w[pos] @ met
        r2 = np.maximum(np.sum(w[pos] * mw, axis=1), 0.0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rq2 = np.where(r2 > 0, r2 ** (q / 2.0 - 1.0), 0.0)
        p = m[pos]
        gp = (
            tau
            * (
                (1.0 - q) / q * rq2 * r2 * p**-q
                + query.coupling.dF(p)
                + v[pos]
                + beta[pos] * (p - tgt[pos])
            )
            + p
            - query.m_bar[pos]
        )
        gw = tau * (rq2 * p ** (1.0 - q))[:, None] * mw + (w[pos] - query.w_bar[pos])
        k = w.shape[1]
        even = np.arange(k) % 2 == 0
        at_zero = w[pos] == 0.0
        # KKT at the cone boundary: even components need gw >= 0, odd <= 0
        viol = np.where(
            at_zero,
            np.where(even[None, :], np.maximum(-gw, 0.0), np.maximum(gw, 0.0)),
            np.abs(gw),
        )
        res[pos] = np.abs(gp) + np.sum(viol, axis=1)
    zero = ~pos
    if np.any(zero):
        idx = np.where(zero)[0]
        qc = q / (q - 1.0)
        nz = len(idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            df0 = query.coupling.dF(np.zeros(nz))
        e0 = tau * (df0 + v[idx] - beta[idx] * tgt[idx]) - query.m_bar[idx]
        finite = np.isfinite(e0)
        viol = np.zeros(nz)
        if np.any(finite):
            # directional test: the origin is optimal iff
            # e0 >= S^qc * tau^(1-qc) / qc with S = sup_{u in K} wb.u/|L u|;
            # probe S with the cone projection and the coordinate rays
            # (exact when L^T L is a multiple of the identity)
            k = w.shape[1]
            probes = [_project_cone_cells(query.w_bar[idx])]
            for c_ in range(k):
                e_c = np.zeros((nz, k))
                e_c[:, c_] = 1.0 if c_ % 2 == 0 else -1.0
                probes.append(e_c)
            s_best = np.zeros(nz)
            for u in probes:
                lu = np.sqrt(np.sum((u @ query.lam.T) ** 2, axis=1))
                num = np.sum(query.w_bar[idx] * u, axis=1)
                good = (lu > 0) & (num > 0)
                s_best = np.where(good, np.maximum(s_best, num / np.maximum(lu, 1e-300)), s_best)
            thresh = (s_best**qc) * tau ** (1.0 - qc) / qc
            viol[finite] = np.maximum(thresh[finite] - e0[finite], 0.0)
        probe_bad = ~finite
        if np.any(probe_bad):
            # derivative diverges at zero: compare objective values directly
            sub = idx[probe_bad]
            phi0 = _phi_origin(query, v, beta, tgt)[sub]
            drop = np.zeros(len(sub))
            for p_probe in (1e-8, 1e-4):
                pv = np.full(len(sub), p_probe)
                phi1 = _phi_terms(query, pv, np.zeros((len(sub), w.shape[1])), mask=sub)
                drop = np.maximum(drop, phi0 - phi1)
            viol[probe_bad] = np.maximum(drop, 0.0)
        res[idx] = viol + np.sum(np.abs(w[idx]), axis=1)
    return res / scale


def prox_cell(query: ProxQuery):
    """Prox of a single cell (or a small batch); verifies optimality.

    Returns ``(m, w)``; raises :class:`ProxError` when the optimality
    residual of the computed point exceeds 1e-8.
    """
    m, w = prox_batch(query)
    res = prox_residual(query, m, w)
    bad = res > 1e-8
    if np.any(bad):
        i = int(np.argmax(res))
        raise ProxError(
            f"prox optimality residual {res[i]:.3e} exceeds 1e-8",
            {"m_bar": query.m_bar[i], "w_bar": query.w_bar[i], "m": m[i], "w": w[i]},
        )
    if query.n_cells == 1:
        return float(m[0]), w[0]
    return m, w
