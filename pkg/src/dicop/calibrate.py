"""Maximum-entropy calibration of the factor marginals to ETL targets.

Each horizon is solved by a fixed point: conditional tranche ETLs are computed
from the current marginal (betas recalibrated), then the marginal closest in
relative entropy to the prior that reproduces the targets is found through its
dual. CDF dominance against the previous horizon and beta monotonicity enter
as inequality rows.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from .copula import FactorMarginal, default_grid, uniform_marginal
from .marketdata import CreditCurve, EtlTargets, TrancheDef, check_targets_consistent
from .model import HorizonFit, ModelState, anchor_scale, fit_horizon, name_arrays, ANCHOR_TENOR
from .pricer import base_tranche_partials, conditional_moments, cond_tranche_loss
from .recovery import RecoverySpec, term_moments

log = logging.getLogger(__name__)

SOFT_WEIGHT = 1e6
FIXED_POINT_TOL = 1e-9
FIXED_POINT_MAX_ITER = 100


class CalibrationError(RuntimeError):
    pass


class InfeasibleError(CalibrationError):
    pass


@dataclass
class EntropyProblem:
    """min KL(q || prior) s.t. A q = b (hard or quadratically relaxed) and C q <= d."""

    prior: np.ndarray
    A: np.ndarray
    b: np.ndarray
    weights: np.ndarray | None = None  # per equality row; inf means hard
    C: np.ndarray | None = None
    d: np.ndarray | None = None
    feasible: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, self.prior.size)
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.weights is None:
            self.weights = np.full(self.b.size, np.inf)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.C is None:
            self.C = np.zeros((0, self.prior.size))
            self.d = np.zeros(0)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float)).reshape(-1, self.prior.size)
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if np.any(self.prior <= 0):
            raise CalibrationError("prior must be strictly positive")
        for M in (self.A, self.C):
            if not np.all(np.isfinite(M)):
                raise CalibrationError("constraint matrix has non-finite entries")
        self.prior = self.prior / self.prior.sum()


@dataclass
class MaxEntResult:
    q: np.ndarray
    multipliers: np.ndarray  # equality multipliers then inequality (<= 0 convention)
    iterations: int
    residuals: np.ndarray  # A q - b
    ineq_slack: np.ndarray  # d - C q
    active: int
    kl: float
    entropy: float


def check_feasible(problem: EntropyProblem) -> None:
    """LP feasibility of the hard rows; raises with the offending rows."""
    hard = np.isinf(problem.weights)
    J = problem.prior.size
    A_eq = np.vstack([np.ones((1, J)), problem.A[hard]])
    b_eq = np.concatenate(([1.0], problem.b[hard]))
    res = linprog(np.zeros(J), A_ub=problem.C if problem.C.size else None,
                  b_ub=problem.d if problem.C.size else None, A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * J, method="highs")
    if res.status == 2:
        lo = problem.A[hard].min(axis=1)
        hi = problem.A[hard].max(axis=1)
        rows = [f"row {k}: target {b:.6g} vs range [{l:.6g}, {h:.6g}]"
                for k, (b, l, h) in enumerate(zip(problem.b[hard], lo, hi)) if not l <= b <= h]
        detail = "; ".join(rows) if rows else "hard equalities incompatible with inequality rows"
        raise InfeasibleError(f"max-entropy constraints infeasible: {detail}")


def max_entropy_solve(
    problem: EntropyProblem,
    tol: float = 1e-12,
    max_iter: int = 500,
    check: bool = True,
    theta0: np.ndarray | None = None,
    warm_start: bool = True,
) -> MaxEntResult:
    """Solve the dual by projected Newton with Armijo backtracking.

    q = prior * exp(theta . G) / Z with G = [A; C]. Inequality multipliers are
    kept <= 0. The Hessian is the covariance of the constraint rows under q
    plus 1/weight on relaxed rows.
    """
    if check:
        check_feasible(problem)
    G = np.vstack([problem.A, problem.C])
    t = np.concatenate([problem.b, problem.d])
    n_eq = problem.A.shape[0]
    m = G.shape[0]
    inv_w = np.zeros(m)
    inv_w[:n_eq] = np.where(np.isinf(problem.weights), 0.0, 1.0 / problem.weights)
    is_ineq = np.zeros(m, dtype=bool)
    is_ineq[n_eq:] = True
    log_prior = np.log(problem.prior)

    def evaluate(theta):
        e = log_prior + theta @ G
        lz = logsumexp(e)
        q = np.exp(e - lz)
        q /= q.sum()  # large multipliers cost absolute precision in e - lz
        f = lz - theta @ t + 0.5 * inv_w @ theta**2
        return f, q

    def project(theta):
        return np.where(is_ineq, np.minimum(theta, 0.0), theta)

    def fun_grad(theta):
        f, q = evaluate(theta)
        return f, G @ q - t + inv_w * theta

    theta = np.zeros(m) if theta0 is None else project(np.asarray(theta0, dtype=float))
    if warm_start and is_ineq.any():
        # quasi-Newton with native bounds finds the active set quickly; the
        # projected Newton loop below then polishes to full precision
        bounds = [(None, 0.0) if ineq else (None, None) for ineq in is_ineq]
        theta = minimize(fun_grad, theta, jac=True, method="L-BFGS-B", bounds=bounds,
                         options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-15}).x
    f, q = evaluate(theta)
    damping = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        Gq = G @ q
        g = Gq - t + inv_w * theta
        pg = theta - project(theta - g)
        pg_norm = float(np.max(np.abs(pg), initial=0.0))
        if pg_norm < tol:
            break
        log.debug("dual it %d |pg| %.3e f %.15g damping %.1e", it, pg_norm, f, damping)
        eps = min(1e-6, pg_norm)
        bound = is_ineq & (theta >= -eps) & (g < 0)
        free = ~bound
        Gc = G - Gq[:, None]
        H = (Gc * q) @ Gc.T + np.diag(inv_w)
        HF = H[np.ix_(free, free)]
        scale = max(1e-12, float(np.trace(HF)) / max(1, HF.shape[0]))
        noise = 64 * np.finfo(float).eps * max(1.0, abs(f))
        accepted = False
        # Levenberg-Marquardt damping: large damping turns the step into a
        # scaled projected gradient, which always descends for a short step.
        while damping <= 1e8:
            lm = max(damping, 1e-14) * scale
            d = np.zeros(m)
            try:
                d[free] = -np.linalg.solve(HF + lm * np.eye(HF.shape[0]), g[free])
            except np.linalg.LinAlgError:
                damping = max(10 * damping, 1e-10)
                continue
            d[bound] = -g[bound] / (np.diag(H)[bound] + lm)
            step = 1.0
            for _ in range(4):
                cand = project(theta + step * d)
                f_new, q_new = evaluate(cand)
                decrease = g @ (cand - theta)
                if decrease < 0 and f_new <= f + 1e-4 * decrease:
                    accepted = True
                    break
                if abs(decrease) < noise and f_new <= f + noise:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                damping = damping / 10 if damping > 1e-10 else 0.0
                break
            damping = max(10 * damping, 1e-10)
        if not accepted:
            if pg_norm < 1e3 * tol:
                break  # stuck at rounding level
            raise CalibrationError(f"max-entropy line search stalled at iteration {it} (|pg| {pg_norm:.2e})")
        theta, f, q = cand, f_new, q_new
    else:
        raise CalibrationError(f"max-entropy dual did not converge in {max_iter} iterations")
    res = problem.A @ q - problem.b
    slack = problem.d - problem.C @ q
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = float(np.sum(np.where(q > 0, q * (np.log(q) - log_prior), 0.0)))
        ent = float(-np.sum(np.where(q > 0, q * np.log(q), 0.0)))
    active = int(np.sum(theta[is_ineq] < 0))
    return MaxEntResult(q, theta, it, res, slack, active, kl, ent)


@dataclass
class HorizonReport:
    horizon: float
    iterations: int
    converged: bool
    target: np.ndarray
    model: np.ndarray
    entropy: float
    kl: float
    active_dominance: int
    beta_clamps: int
    beta_violations: int
    trace: list[float] = field(default_factory=list)  # max |dq| per outer iteration
    seconds: float = 0.0

    @property
    def residuals(self) -> np.ndarray:
        return self.model - self.target


@dataclass
class CalibrationResult:
    model: ModelState
    targets: EtlTargets
    reports: list[HorizonReport]
    seconds: float = 0.0


def _constraint_rows(fit: HorizonFit, model_w, spec, scale, tranches: Sequence[TrancheDef]):
    m = conditional_moments(model_w, fit.cond_probs(), spec, scale)
    return np.array([cond_tranche_loss(m, tr.attach, tr.detach) for tr in tranches])


def _moment_terms(spec: RecoverySpec, P, scale):
    """Per-name contributions to the conditional loss mean and variance."""
    tm = term_moments(spec, P, scale)
    lgd = 1.0 - tm.mu_0t
    return P * lgd, P * (tm.var_0t + (1.0 - P) * lgd * lgd)


def etl_jacobian(fit: HorizonFit, model_w, spec, scale, tranches: Sequence[TrancheDef], rows=None):
    """Derivative of the model tranche ETLs along simplex directions e_j - q.

    Includes the response of the betas (or of c for clamped names) to q
    through the hazard split; the EL-preserving adjustment of p and the anchor
    scales are held fixed. Column j is d/dh r(q + h (e_j - q)) at h = 0.
    """
    x, q = fit.marginal.grid, fit.marginal.probs
    beta, c = fit.cond.beta, fit.cond.c
    E = np.exp(-np.outer(x, beta))
    L = q @ E
    M = q @ (x[:, None] * E)
    P = -np.expm1(np.log(c) - np.outer(x, beta))
    free = ~fit.beta_diag.clamped
    with np.errstate(divide="ignore", invalid="ignore"):
        # free: d beta = (E_j - L)/M; clamped: d log c = -(E_j - L)/L
        T = np.where(free, c * x[:, None] * E / np.where(M > 0, M, 1.0), c * E / L)
    T = np.where(np.isfinite(T), T, 0.0)
    h = 1e-7
    lo, hi = np.maximum(P - h, 0.0), np.minimum(P + h, 1.0)
    g1a, g2a = _moment_terms(spec, lo, scale)
    g1b, g2b = _moment_terms(spec, hi, scale)
    d1 = (g1b - g1a) / (hi - lo)
    d2 = (g2b - g2a) / (hi - lo)
    w = np.asarray(model_w, dtype=float)
    m = conditional_moments(w, P, spec, scale)
    A = _constraint_rows(fit, w, spec, scale, tranches) if rows is None else rows
    r = A @ q
    jac = np.empty_like(A)
    for k, tr in enumerate(tranches):
        dm, dv = base_tranche_partials(m.mu_L, m.var_L, tr.detach)
        if tr.attach > 0:
            am, av = base_tranche_partials(m.mu_L, m.var_L, tr.attach)
            dm, dv = dm - am, dv - av
        S = (dm[:, None] * (w * d1) + dv[:, None] * (w * w * d2)) / (tr.detach - tr.attach)
        U = np.einsum("j,ji,ji->i", q, S, T)
        jac[k] = A[k] + (E - L) @ U - r[k]
    return jac


def _beta_rows(fit: HorizonFit, prev_fit: HorizonFit, gamma: np.ndarray):
    """Linear rows C q <= d equivalent to beta_i >= previous beta_i at fixed p.

    beta >= b0 iff E[exp(-b0 X)] >= (1 - p)^gamma, because the Laplace
    transform decreases in beta. Names with no systemic hazard are skipped.
    """
    floor = prev_fit.cond.beta
    keep = (gamma > 0) & (floor > 0)
    target = np.exp(gamma[keep] * np.log1p(-fit.p_adj[keep]))
    C = -np.exp(-np.outer(floor[keep], fit.marginal.grid)) / target[:, None]
    return C, -np.ones(C.shape[0])


def calibrate_horizon(
    target: np.ndarray,
    tranches: Sequence[TrancheDef],
    curves: Sequence[CreditCurve],
    spec: RecoverySpec,
    grid: np.ndarray,
    horizon: float,
    prev_fit: HorizonFit | None = None,
    scale: np.ndarray | None = None,
    soft_weight: float = SOFT_WEIGHT,
    tol: float = FIXED_POINT_TOL,
    max_iter: int = FIXED_POINT_MAX_ITER,
    start: np.ndarray | None = None,
    method: str = "linearized",
) -> tuple[HorizonFit, np.ndarray, HorizonReport]:
    """Fixed-point calibration of one marginal.

    ``scale`` None means this is the anchor tenor: name scales are recomputed
    from each iterate. Returns the final fit, the name scales and a report.

    method
        ``"linearized"`` (default) feeds the entropy step the first-order
        expansion of the model ETLs in q, beta response included, and adds
        linear rows that keep every beta at or above its previous-horizon
        value. ``"frozen"`` holds the conditional ETLs of the current iterate
        fixed, the plain fixed point. The first horizon has no cross-horizon
        rows and always uses the plain fixed point, which converges there
        while full linear steps from the uniform prior overshoot.
    """
    if method not in ("linearized", "frozen"):
        raise ValueError(f"unknown calibration method {method!r}")
    if prev_fit is None:
        method = "frozen"
    t0 = time.perf_counter()
    target = np.asarray(target, dtype=float)
    weights = np.array([c.weight for c in curves])
    _, gamma = name_arrays(curves, horizon)
    prior = prev_fit.marginal.probs if prev_fit is not None else np.full(grid.size, 1.0 / grid.size)
    prior = np.maximum(prior, 1e-300)
    prior = prior / prior.sum()
    is_index = np.array([tr.attach == 0 and tr.detach == 1 for tr in tranches])
    if method == "frozen":
        w = np.where(is_index, np.inf, soft_weight)
    else:
        # the EL-preserving p adjustment reproduces the index at every fixed
        # point, so its row needs no hard treatment in the linear model
        w = np.full(len(tranches), soft_weight)
    if prev_fit is not None:
        C_dom = np.tril(np.ones((grid.size - 1, grid.size)))
        d_dom = prev_fit.marginal.cdf[:-1]
    else:
        C_dom = d_dom = None
    anchor = scale is None
    q = prior.copy() if start is None else np.asarray(start, dtype=float)
    trace = []
    converged = False
    result = None
    it = 0
    for it in range(1, max_iter + 1):
        marginal = FactorMarginal(grid, q, horizon)
        sc = anchor_scale(curves, spec, marginal) if anchor else scale
        fit = fit_horizon(curves, spec, marginal, sc, prev_fit)
        A = _constraint_rows(fit, weights, spec, sc, tranches)
        C, d = C_dom, d_dom
        if method == "frozen":
            # Seeded from the prior, dominance plus an increasing index row
            # leave q = prior as the only hard-feasible point, so the first
            # step relaxes it.
            w_it = np.minimum(w, soft_weight) if (it == 1 and prev_fit is not None) else w
            problem = EntropyProblem(prior, A, target, w_it, C, d)
        else:
            jac = etl_jacobian(fit, weights, spec, sc, tranches, A)
            if prev_fit is not None:
                Cb, db = _beta_rows(fit, prev_fit, gamma)
                C, d = np.vstack([C_dom, Cb]), np.concatenate([d_dom, db])
            problem = EntropyProblem(prior, jac, target - A @ q + jac @ q, w, C, d)
        result = max_entropy_solve(problem, check=(method == "linearized" or it > 1 or prev_fit is None))
        dq = float(np.max(np.abs(result.q - q)))
        trace.append(dq)
        log.debug("%gY iteration %d max|dq| %.3e", horizon, it, dq)
        q = result.q
        if dq < tol:
            converged = True
            break
    if not converged:
        raise CalibrationError(
            f"{horizon:g}Y fixed point did not converge in {max_iter} iterations; "
            f"max|dq| trace tail: {', '.join(f'{v:.2e}' for v in trace[-5:])}"
        )
    q = q / q.sum()
    if prev_fit is not None:
        # absorb solver-level rounding so dominance holds exactly
        cdf = np.minimum(np.cumsum(q), prev_fit.marginal.cdf)
        cdf[-1] = 1.0
        q = np.diff(np.concatenate(([0.0], np.maximum.accumulate(cdf))))
    marginal = FactorMarginal(grid, q, horizon)
    sc = anchor_scale(curves, spec, marginal) if anchor else scale
    fit = fit_horizon(curves, spec, marginal, sc, prev_fit)
    model_etl = marginal.probs @ _constraint_rows(fit, weights, spec, sc, tranches).T
    n_dom = grid.size - 1 if prev_fit is not None else 0
    active_dom = int(np.sum(result.multipliers[len(tranches):len(tranches) + n_dom] < 0))
    report = HorizonReport(
        horizon, it, converged, target, model_etl, result.entropy, result.kl, active_dom,
        int(fit.beta_diag.clamped.sum()), int(fit.beta_diag.violated.sum()), trace,
        time.perf_counter() - t0,
    )
    if report.beta_clamps or report.beta_violations:
        log.warning("%gY: beta clamped for %d name(s), %d monotonicity violation(s)",
                    horizon, report.beta_clamps, report.beta_violations)
    return fit, sc, report


def calibrate(
    curves: Sequence[CreditCurve],
    targets: EtlTargets,
    spec: RecoverySpec,
    grid: np.ndarray | None = None,
    anchor: float = ANCHOR_TENOR,
    soft_weight: float = SOFT_WEIGHT,
    method: str = "linearized",
) -> CalibrationResult:
    """Calibrate marginals horizon by horizon (ascending)."""
    t0 = time.perf_counter()
    check_targets_consistent(targets, curves)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    order = np.argsort(targets.horizons)
    anchor_h = min(targets.horizons, key=lambda h: abs(h - anchor))
    if anchor_h != targets.horizons[order[0]]:
        raise CalibrationError("the anchor tenor must be the first calibrated horizon")
    scale = None
    prev = None
    reports = []
    fits = []
    for h in order:
        t = targets.horizons[h]
        prev, scale, rep = calibrate_horizon(
            targets.etl[:, h], targets.tranches, curves, spec, grid, t, prev, scale, soft_weight,
            method=method,
        )
        fits.append(prev)
        reports.append(rep)
        log.info("%gY calibrated in %d iterations (%.2fs), max |residual| %.2e",
                 t, rep.iterations, rep.seconds, np.max(np.abs(rep.residuals)))
    state = ModelState(list(curves), spec, scale, fits)
    return CalibrationResult(state, targets, reports, time.perf_counter() - t0)


def calibration_report(result: CalibrationResult) -> str:
    """Delimited residual table followed by per-horizon diagnostics.

    Wall-clock timings are left out so reruns produce identical bytes.
    """
    lines = ["attach,detach,horizon,target,model,residual"]
    for rep in result.reports:
        for tr, tgt, mod in zip(result.targets.tranches, rep.target, rep.model):
            lines.append(f"{tr.attach:.6f},{tr.detach:.6f},{rep.horizon:g},{tgt:.6f},{mod:.6f},{mod - tgt:.6f}")
    lines.append("")
    lines.append("horizon,iterations,entropy,kl_to_prior,active_dominance,beta_clamps,beta_violations")
    for rep in result.reports:
        lines.append(
            f"{rep.horizon:g},{rep.iterations},{rep.entropy:.6f},{rep.kl:.6f},{rep.active_dominance},"
            f"{rep.beta_clamps},{rep.beta_violations}"
        )
    return "\n".join(lines) + "\n"
