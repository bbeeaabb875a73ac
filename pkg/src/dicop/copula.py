"""Default-indicator copula on a discrete, increasing common factor.

Conditional default probabilities follow ``p(x, t) = 1 - c(t) exp(-beta(t) x)``
where the systemic part carries a fraction ``gamma`` of the cumulative hazard.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri


class CopulaError(ValueError):
    pass


class HazardSplitError(CopulaError):
    pass


GRID_SIZE = 101
GRID_XMIN = 1e-3
GRID_XMAX = 1e4


def default_grid(size: int = GRID_SIZE, x_min: float = GRID_XMIN, x_max: float = GRID_XMAX) -> np.ndarray:
    """x_1 = 0 followed by ``size - 1`` geometrically spaced points on [x_min, x_max]."""
    if size < 2 or not 0 < x_min < x_max:
        raise CopulaError("grid needs size >= 2 and 0 < x_min < x_max")
    return np.concatenate(([0.0], np.geomspace(x_min, x_max, size - 1)))


@dataclass(frozen=True)
class FactorMarginal:
    grid: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)
    horizon: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.grid, dtype=float)
        q = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "grid", x)
        object.__setattr__(self, "probs", q)
        if x.shape != q.shape or x.ndim != 1:
            raise CopulaError("grid and probs must be matching 1-D arrays")
        if x[0] < 0 or np.any(np.diff(x) <= 0):
            raise CopulaError("grid must be non-negative and strictly ascending")
        if np.any(q < 0):
            raise CopulaError("negative factor probability")
        if abs(q.sum() - 1.0) > 1e-12:
            raise CopulaError(f"factor probabilities sum to {q.sum():.15f}")

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def mean(self) -> float:
        return float(self.probs @ self.grid)

    def laplace(self, beta) -> np.ndarray:
        """E[exp(-beta X)] for an array of loadings."""
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        return np.exp(self.log_laplace(beta))

    def log_laplace(self, beta) -> np.ndarray:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        return logsumexp(-np.outer(self.grid, beta), b=self.probs[:, None], axis=0)


def check_dominance(marginals: Sequence[FactorMarginal], tol: float = 1e-10) -> float:
    """Largest violation of F(x, t2) <= F(x, t1) across consecutive marginals."""
    worst = 0.0
    for a, b in zip(marginals[:-1], marginals[1:]):
        worst = max(worst, float(np.max(b.cdf - a.cdf)))
    return worst


def uniform_marginal(grid: np.ndarray, horizon: float = 0.0) -> FactorMarginal:
    return FactorMarginal(grid, np.full(grid.size, 1.0 / grid.size), horizon)


@dataclass(frozen=True)
class ConditionalCurve:
    """Loadings and idiosyncratic survival at one horizon (scalar or per name)."""

    beta: np.ndarray
    c: np.ndarray

    def prob(self, x) -> np.ndarray:
        return conditional_default_prob(self, x)


@dataclass
class BetaDiagnostics:
    clamped: np.ndarray  # beta raised to the previous horizon's value
    violated: np.ndarray  # clamp impossible without c > 1; beta left below floor
    iterations: int = 0


def _solve_hazard_split(log_target: np.ndarray, marginal: FactorMarginal, tol: float = 1e-13, max_iter: int = 200):
    """Solve log E[exp(-beta X)] = log_target for beta >= 0.

    The left side is convex and decreasing in beta, so Newton started from the
    Jensen lower bound beta0 = -log_target / E[X] increases monotonically to the
    root.
    """
    x, q = marginal.grid, marginal.probs
    mean_x = marginal.mean()
    beta = np.where(log_target < 0, -log_target / mean_x, 0.0)
    it = 0
    for it in range(1, max_iter + 1):
        e = -np.outer(x, beta)
        lse = logsumexp(e, b=q[:, None], axis=0)
        w = q[:, None] * np.exp(e - lse)
        tilted_mean = x @ w
        f = lse - log_target
        active = (np.abs(f) > tol) & (tilted_mean > 0)
        if not active.any():
            break
        step = np.where(active, f / np.where(tilted_mean > 0, tilted_mean, 1.0), 0.0)
        beta = beta + step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, beta)):
            break
    return beta, it


def calibrate_beta(p, gamma, marginal: FactorMarginal, beta_floor=None) -> tuple[ConditionalCurve, BetaDiagnostics]:
    """Fit beta and c per name so the systemic factor carries a ``gamma`` share of hazard.

    ``p`` and ``gamma`` are arrays over names at ``marginal.horizon``.
    ``beta_floor`` (previous horizon's betas) enforces beta non-decreasing in t;
    clamped names get c re-solved so that E[p(X, t)] = p(t) still holds exactly.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), p.shape)
    if np.any(p < 0) or np.any(p >= 1):
        raise CopulaError("default probability outside [0, 1)")
    log_target = gamma * np.log1p(-p)
    q0 = marginal.probs[0] if marginal.grid[0] == 0 else 0.0
    # E[exp(-beta X)] >= P(X = 0) for every beta
    floor_log = np.log(q0) if q0 > 0 else -np.inf
    infeasible = (log_target < 0) & (log_target <= floor_log + 1e-15)
    if infeasible.any():
        idx = np.flatnonzero(infeasible)
        raise HazardSplitError(
            f"hazard split infeasible for {idx.size} name(s) (first index {idx[0]}): "
            f"P(X=0)={q0:.6g} >= (1-p)^gamma"
        )
    beta, iters = _solve_hazard_split(log_target, marginal)
    clamped = np.zeros(p.shape, dtype=bool)
    violated = np.zeros(p.shape, dtype=bool)
    if beta_floor is not None:
        floor = np.broadcast_to(np.asarray(beta_floor, dtype=float), p.shape)
        clamped = beta < floor
        if clamped.any():
            trial = np.where(clamped, floor, beta)
            c_trial = np.exp(np.log1p(-p) - marginal.log_laplace(trial))
            violated = clamped & (c_trial > 1.0)
            clamped = clamped & ~violated
            beta = np.where(clamped, floor, beta)
            if violated.any():
                # all hazard systemic: E[exp(-beta X)] = 1 - p, c = 1
                b1, _ = _solve_hazard_split(np.log1p(-p), marginal)
                beta = np.where(violated, b1, beta)
    c = np.exp(np.log1p(-p) - marginal.log_laplace(beta))
    c = np.minimum(c, 1.0)
    return ConditionalCurve(beta, c), BetaDiagnostics(clamped, violated, iters)


def conditional_default_prob(cond: ConditionalCurve, x) -> np.ndarray:
    """p(x) = 1 - c exp(-beta x); grid along axis 0 when beta is per name."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(cond.beta, dtype=float)
    log_c = np.log(np.asarray(cond.c, dtype=float))
    if beta.ndim and x.ndim:
        return -np.expm1(log_c - np.multiply.outer(x, beta))
    return -np.expm1(log_c - beta * x)


def gaussian_reference(p_t, rho, x):
    """One-factor Gaussian conditional default probability (standalone reference)."""
    if not 0.0 <= rho < 1.0:
        raise CopulaError("rho must lie in [0, 1)")
    return ndtr((ndtri(p_t) - np.sqrt(rho) * np.asarray(x, dtype=float)) / np.sqrt(1.0 - rho))


def save_marginals(marginals: Sequence[FactorMarginal], path: str | Path) -> None:
    """Write ``t, j, x_j, q_j`` rows."""
    with open(path, "w") as fh:
        fh.write("t,j,x,q\n")
        for m in marginals:
            for j, (x, q) in enumerate(zip(m.grid, m.probs)):
                fh.write(f"{m.horizon:g},{j},{float(x)!r},{float(q)!r}\n")


def load_marginals(path: str | Path) -> list[FactorMarginal]:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    rows = np.atleast_1d(rows)
    out = []
    for t in np.unique(rows["t"]):
        sel = rows[rows["t"] == t]
        sel = sel[np.argsort(sel["j"])]
        out.append(FactorMarginal(sel["x"].astype(float), sel["q"].astype(float), float(t)))
    return out
