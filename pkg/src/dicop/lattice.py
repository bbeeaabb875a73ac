"""Two-dimensional (X_t, y_t) lattice driven by an Ornstein-Uhlenbeck process.

The transition shock of the factor chain is split into a persistent part, the
standardized driver ``(y_t - mu_t) / sigma_t``, and a one-period shock:
``z = beta * u + sqrt(1 - beta^2) * e``. Per-row thresholds are solved so that
averaging the conditional transitions over ``f(y | X_t)`` returns the
unconditional chain row, which leaves every X marginal unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .markov import TransitionChain
from .marketdata import TrancheDef
from .model import ModelState
from .pricer import conditional_moments, cond_tranche_loss

log = logging.getLogger(__name__)

Y_NODES = 61
Y_SPAN = 5.0  # half-width of the y grid in stationary standard deviations
LEAKAGE_TOL = 1e-8
THRESHOLD_TOL = 1e-13
THRESHOLD_BRACKET = 10.0
BETA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0 - 1e-6)
_INV_SQRT_2PI = 0.3989422804014327


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class OuParams:
    """Mean-reverting driver with mean ``ybar``, speed ``kappa`` and volatility ``vol``."""

    kappa: float = 0.05
    ybar: float = 1.0
    vol: float = 1.0
    y0: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise LatticeError("kappa must be positive")
        if not self.vol > 0:
            raise LatticeError("vol must be positive")

    @property
    def stationary_sd(self) -> float:
        return self.vol / np.sqrt(2.0 * self.kappa)


def ou_moments(params: OuParams, t: float) -> tuple[float, float]:
    """Mean and variance of y_t given y_0."""
    if t < 0:
        raise LatticeError("t must be non-negative")
    decay = np.exp(-params.kappa * t)
    mean = params.y0 * decay + params.ybar * (1.0 - decay)
    var = params.vol**2 * -np.expm1(-2.0 * params.kappa * t) / (2.0 * params.kappa)
    return float(mean), float(var)


def y_grid(params: OuParams, nodes: int = Y_NODES, span: float = Y_SPAN) -> np.ndarray:
    """Equally spaced y nodes covering y0 and ybar plus ``span`` stationary deviations."""
    if nodes < 3:
        raise LatticeError("need at least 3 y nodes")
    lo = min(params.y0, params.ybar) - span * params.stationary_sd
    hi = max(params.y0, params.ybar) + span * params.stationary_sd
    return np.linspace(lo, hi, nodes)


def gaussian_buckets(y: np.ndarray, mean, var, newton_iter: int = 50):
    """Discrete laws on ``y`` matching N(mean, var) in mass, mean and variance.

    ``mean`` and ``var`` are 1-D arrays (one law per row). Bucket masses of
    the Gaussian over midpoint cells are tilted by exp(a z + b z^2) so the
    first two moments are exact. Rows whose Gaussian leaks more than 1e-3
    past the grid ends are only renormalized. Returns (weights, leakage per
    row); callers weight the leakage by the mass actually sitting in each row.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    sd = np.sqrt(var)
    h = y[1] - y[0]
    edges = np.concatenate(([y[0] - 0.5 * h], 0.5 * (y[1:] + y[:-1]), [y[-1] + 0.5 * h]))
    zc = (edges[None, :] - mean[:, None]) / sd[:, None]
    cdf = ndtr(zc)
    leak = cdf[:, 0] + (1.0 - cdf[:, -1])
    w = np.diff(cdf, axis=1)
    w /= w.sum(axis=1, keepdims=True)
    z = (y[None, :] - mean[:, None]) / sd[:, None]
    theta = np.zeros((mean.size, 2))
    logw = np.log(np.maximum(w, 1e-300))
    for _ in range(newton_iter):
        e = logw + theta[:, :1] * z + theta[:, 1:] * z * z
        e -= e.max(axis=1, keepdims=True)
        p = np.exp(e)
        p /= p.sum(axis=1, keepdims=True)
        m1 = (p * z).sum(axis=1)
        m2 = (p * z * z).sum(axis=1)
        m3 = (p * z**3).sum(axis=1)
        m4 = (p * z**4).sum(axis=1)
        g = np.stack([m1, m2 - 1.0], axis=1)  # target: mean 0, second moment 1
        g[leak > 1e-3] = 0.0
        if np.max(np.abs(g)) < 1e-14:
            break
        # Jacobian of (m1, m2) in (a, b) is the covariance of (z, z^2)
        h11 = m2 - m1 * m1
        h12 = m3 - m1 * m2
        h22 = m4 - m2 * m2
        det = h11 * h22 - h12 * h12
        # rows narrower than the node spacing can collapse onto one or two nodes
        ok = det > 1e-300
        det = np.where(ok, det, 1.0)
        da = np.where(ok, (h22 * g[:, 0] - h12 * g[:, 1]) / det, 0.0)
        db = np.where(ok, (-h12 * g[:, 0] + h11 * g[:, 1]) / det, 0.0)
        theta -= np.nan_to_num(np.stack([da, db], axis=1))
    return p, leak


def ou_kernel(params: OuParams, y: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(M, M) moment-matched transition matrix of y over ``dt`` and per-row leakage."""
    decay = np.exp(-params.kappa * dt)
    mean = params.ybar + (y - params.ybar) * decay
    var = params.vol**2 * -np.expm1(-2.0 * params.kappa * dt) / (2.0 * params.kappa)
    return gaussian_buckets(y, mean, np.full(y.size, var))


def _check_leakage(leak: float, t: float) -> None:
    if leak > LEAKAGE_TOL:
        raise LatticeError(f"probability leakage {leak:.2e} beyond the y grid at {t:g}Y; widen the grid")


def _mixture_cdf(c, f, shift, s):
    """sum_m f_m Phi((c - shift_m) / s) and its derivative in c, broadcast over rows."""
    arg = (c[..., None] - shift[None, None, :]) / s
    val = np.einsum("jkm,jm->jk", ndtr(arg), f)
    der = np.einsum("jkm,jm->jk", np.exp(-0.5 * arg * arg), f) * (_INV_SQRT_2PI / s)
    return val, der


def solve_thresholds(row_cdf: np.ndarray, f: np.ndarray, u: np.ndarray, beta: float,
                     tol: float = THRESHOLD_TOL, max_iter: int = 200) -> np.ndarray:
    """Thresholds c[j, k] with E_f[Phi((c - beta u) / sqrt(1 - beta^2))] = row_cdf[j, k].

    ``f`` holds one conditional y-law per row over standardized nodes ``u``.
    CDF values 0 and 1 map to -inf and +inf. Safeguarded Newton steps inside
    a maintained bracket; any step that leaves the bracket is replaced by
    bisection.
    """
    row_cdf = np.atleast_2d(np.asarray(row_cdf, dtype=float))
    f = np.atleast_2d(np.asarray(f, dtype=float))
    if not 0.0 <= beta < 1.0:
        raise LatticeError("beta must lie in [0, 1)")
    out = np.where(row_cdf <= 0.0, -np.inf, np.where(row_cdf >= 1.0, np.inf, np.nan))
    inner = np.isnan(out)
    if beta == 0.0:
        out[inner] = ndtri(row_cdf[inner])
        return out
    if not inner.any():
        return out
    s = np.sqrt(1.0 - beta * beta)
    shift = beta * u
    support = f > 0
    lo_s = np.min(np.where(support, shift[None, :], np.inf), axis=1)
    hi_s = np.max(np.where(support, shift[None, :], -np.inf), axis=1)
    lo = np.broadcast_to((np.minimum(lo_s, 0.0) - THRESHOLD_BRACKET)[:, None], row_cdf.shape).copy()
    hi = np.broadcast_to((np.maximum(hi_s, 0.0) + THRESHOLD_BRACKET)[:, None], row_cdf.shape).copy()
    target = np.where(inner, row_cdf, 0.5)
    c = np.where(inner, ndtri(target) * s + (f @ shift)[:, None], 0.0)
    c = np.clip(c, lo, hi)
    for _ in range(max_iter):
        val, der = _mixture_cdf(c, f, shift, s)
        r = val - target
        done = ~inner | (np.abs(r) < tol) | (hi - lo < 1e-15 * np.maximum(1.0, np.abs(c)))
        if done.all():
            break
        lo = np.where(r < 0, c, lo)
        hi = np.where(r > 0, c, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            newton = c - r / der
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        c = np.where(done, c, np.where(ok, newton, 0.5 * (lo + hi)))
    out[inner] = c[inner]
    return out


def threshold_residual(thresholds: np.ndarray, row_cdf: np.ndarray, f: np.ndarray, u: np.ndarray, beta: float) -> float:
    """max |E_f[Phi(...)] - row CDF| over finite thresholds."""
    if beta == 0.0:
        val = ndtr(thresholds)
        return float(np.max(np.abs(val - row_cdf)))
    s = np.sqrt(1.0 - beta * beta)
    c = np.where(np.isfinite(thresholds), thresholds, 0.0)
    val, _ = _mixture_cdf(c, f, beta * u, s)
    val = np.where(np.isneginf(thresholds), 0.0, np.where(np.isposinf(thresholds), 1.0, val))
    return float(np.max(np.abs(val - row_cdf)))


@dataclass
class LatticeState:
    x_grid: np.ndarray = field(repr=False)
    y_grid: np.ndarray = field(repr=False)
    horizons: tuple[float, ...]  # chain horizons, t = 0 first
    joint: list[np.ndarray] = field(repr=False)  # per horizon after 0, (J, M)
    transitions: list[np.ndarray] = field(repr=False)  # per step, (J, M, J) P(X' = x_k | x_j, y_m)
    kernels: list[np.ndarray] = field(repr=False)  # per step, (M, M) y transition
    thresholds: list[np.ndarray | None] = field(repr=False)  # per step (None for the first)
    betas: tuple[float, ...]
    params: OuParams
    max_threshold_residual: float = 0.0

    def x_marginal(self, k: int) -> np.ndarray:
        return self.joint[k].sum(axis=1)

    def standardized_moments(self, k: int) -> tuple[float, float]:
        """Lattice mean and variance of (y - mu_t) / sigma_t at horizon index ``k`` (after 0)."""
        mu, var = ou_moments(self.params, self.horizons[k + 1])
        u = (self.y_grid - mu) / np.sqrt(var)
        fy = self.joint[k].sum(axis=0)
        m = float(fy @ u)
        return m, float(fy @ (u * u)) - m * m


def _betas(beta, n_steps: int) -> tuple[float, ...]:
    if np.ndim(beta) == 0:
        return (float(beta),) * n_steps
    b = tuple(float(v) for v in beta)
    if len(b) != n_steps:
        raise LatticeError(f"beta schedule needs {n_steps} entries, got {len(b)}")
    return b


def forward_induct(chain: TransitionChain, params: OuParams, beta, nodes: int = Y_NODES,
                   span: float = Y_SPAN) -> LatticeState:
    """Build the joint (X, y) lattice on the chain's horizons.

    ``beta`` is a constant or one value per chain step. At t = 0 the driver
    has zero variance, so the first step uses the unconditional chain row.
    """
    hs = chain.horizons
    n_steps = len(chain.matrices)
    betas = _betas(beta, n_steps)
    for b in betas:
        if not 0.0 <= b < 1.0:
            raise LatticeError("beta must lie in [0, 1)")
    y = y_grid(params, nodes, span)
    J, M = chain.n_states, y.size
    mu1, var1 = ou_moments(params, hs[1])
    g1, leak1 = gaussian_buckets(y, [mu1], [var1])
    _check_leakage(float(leak1[0]), hs[1])
    P0 = chain.matrices[0]
    q1 = chain.initial() @ P0
    joint = [np.outer(q1, g1[0])]
    trans = [np.broadcast_to(P0[:, None, :], (J, M, J)).copy()]
    kernels = [np.broadcast_to(g1[0], (M, M)).copy()]
    thresholds: list[np.ndarray | None] = [None]
    worst = 0.0
    for k in range(1, n_steps):
        t, t_next = hs[k], hs[k + 1]
        P = chain.matrices[k]
        b = betas[k]
        Ky, leak = ou_kernel(params, y, t_next - t)
        mu, var = ou_moments(params, t)
        u = (y - mu) / np.sqrt(var)
        cur = joint[-1]
        _check_leakage(float(cur.sum(axis=0) @ leak), t_next)
        qx = cur.sum(axis=1)
        live = np.flatnonzero(qx > 0)
        F = np.cumsum(P, axis=1)
        F[:, -1] = 1.0
        F = np.minimum(F, 1.0)
        pk = np.broadcast_to(P[:, None, :], (J, M, J)).copy()
        c_all = np.full((J, J), np.nan)
        if live.size:
            f = cur[live] / qx[live, None]
            c = solve_thresholds(F[live], f, u, b)
            worst = max(worst, threshold_residual(c, F[live], f, u, b))
            c_all[live] = c
            if b > 0:
                s = np.sqrt(1.0 - b * b)
                cc = np.where(np.isfinite(c), c, np.where(c > 0, 1e300, -1e300))
                G = ndtr((cc[:, None, :] - b * u[None, :, None]) / s)  # (live, M, J)
                G[..., -1] = 1.0
                pk[live] = np.diff(np.concatenate([np.zeros(G.shape[:2] + (1,)), G], axis=2), axis=2)
                pk[live] = np.maximum(pk[live], 0.0)
        T = np.einsum("jm,jmk->mk", cur, pk)
        joint.append(T.T @ Ky)
        trans.append(pk)
        kernels.append(Ky)
        thresholds.append(c_all)
    return LatticeState(chain.grid, y, tuple(hs), joint, trans, kernels, thresholds, betas, params, worst)


@dataclass(frozen=True)
class OptionSpec:
    """Right to buy protection at ``exercise`` on the ``maturity`` tranche loss."""

    exercise: float
    maturity: float
    tranches: tuple[TrancheDef, ...]
    strikes: tuple[float, ...] | None = None  # None: each tranche's ETL at maturity

    def __post_init__(self):
        if not self.exercise < self.maturity:
            raise LatticeError("exercise must precede maturity")
        if self.strikes is not None:
            if len(self.strikes) != len(self.tranches):
                raise LatticeError("one strike per tranche")
            if any(k < 0 for k in self.strikes):
                raise LatticeError("strike must be non-negative")


def _step_index(hs: Sequence[float], t: float, what: str) -> int:
    for i, h in enumerate(hs):
        if abs(h - t) < 1e-12:
            return i
    raise LatticeError(f"{what} {t:g} is not on the chain grid")


def terminal_values(model: ModelState, maturity: float, tranches: Sequence[TrancheDef]) -> np.ndarray:
    """(tranches, J) conditional tranche loss at the maturity factor nodes."""
    fit = model.fit_at(maturity)
    m = conditional_moments(model.weights, fit.cond_probs(), model.spec, model.scale)
    return np.array([cond_tranche_loss(m, tr.attach, tr.detach) for tr in tranches])


def _strikes(option: OptionSpec, model: ModelState, V_T: np.ndarray) -> np.ndarray:
    if option.strikes is not None:
        return np.asarray(option.strikes, dtype=float)
    return V_T @ model.fit_at(option.maturity).marginal.probs


@dataclass
class OptionPrices:
    tranches: tuple[TrancheDef, ...]
    strikes: np.ndarray
    forward: np.ndarray  # forward underlying value (equals the maturity ETL)
    prices: np.ndarray


def price_tranche_option(lattice: LatticeState, option: OptionSpec, model: ModelState) -> OptionPrices:
    """European protection-buyer calls on tranche loss, no discounting."""
    hs = lattice.horizons
    i1 = _step_index(hs, option.exercise, "exercise")
    i2 = _step_index(hs, option.maturity, "maturity")
    if i1 == 0:
        raise LatticeError("exercise at t = 0 is not supported")
    V_T = terminal_values(model, option.maturity, option.tranches)
    strikes = _strikes(option, model, V_T)
    M = lattice.y_grid.size
    V = np.repeat(V_T[:, :, None], M, axis=2)  # (tranches, J, M)
    for k in range(i2 - 1, i1 - 1, -1):
        W = np.einsum("mn,tkn->tmk", lattice.kernels[k], V)  # E over y' given y
        V = np.einsum("jmk,tmk->tjm", lattice.transitions[k], W)
    weights = lattice.joint[i1 - 1]
    forward = np.einsum("jm,tjm->t", weights, V)
    payoff = np.maximum(V - strikes[:, None, None], 0.0)
    prices = np.einsum("jm,tjm->t", weights, payoff)
    return OptionPrices(option.tranches, strikes, forward, prices)


def price_chain_only(chain: TransitionChain, option: OptionSpec, model: ModelState) -> OptionPrices:
    """Backward induction on the X chain alone (the lattice at beta = 0)."""
    hs = chain.horizons
    i1 = _step_index(hs, option.exercise, "exercise")
    i2 = _step_index(hs, option.maturity, "maturity")
    V_T = terminal_values(model, option.maturity, option.tranches)
    strikes = _strikes(option, model, V_T)
    V = V_T
    for k in range(i2 - 1, i1 - 1, -1):
        V = V @ chain.matrices[k].T
    q = chain.marginals()[i1]
    forward = V @ q
    prices = np.maximum(V - strikes[:, None], 0.0) @ q
    return OptionPrices(option.tranches, strikes, forward, prices)


@dataclass
class BetaSweep:
    betas: tuple[float, ...]
    tranches: tuple[TrancheDef, ...]
    strikes: np.ndarray
    prices: np.ndarray  # (tranches, betas)
    marginal_error: float  # max |lattice X marginal - chain marginal| over betas and steps
    threshold_residual: float

    def to_csv(self) -> str:
        head = "attach,detach,strike," + ",".join(f"beta_{b:.6f}" for b in self.betas)
        lines = [head]
        for k, tr in enumerate(self.tranches):
            vals = ",".join(f"{v:.6f}" for v in self.prices[k])
            lines.append(f"{tr.attach:.6f},{tr.detach:.6f},{self.strikes[k]:.6f},{vals}")
        return "\n".join(lines) + "\n"


def beta_sweep(chain: TransitionChain, params: OuParams, option: OptionSpec, model: ModelState,
               betas: Sequence[float] = BETA_SWEEP) -> BetaSweep:
    prices = []
    marg_err = 0.0
    resid = 0.0
    strikes = None
    chain_marg = chain.marginals()[1:]
    for b in betas:
        lat = forward_induct(chain, params, b)
        for k, q in enumerate(chain_marg):
            marg_err = max(marg_err, float(np.max(np.abs(lat.x_marginal(k) - q))))
        resid = max(resid, lat.max_threshold_residual)
        res = price_tranche_option(lat, option, model)
        prices.append(res.prices)
        strikes = res.strikes
        log.info("beta %.6f: prices %s", b, np.array2string(res.prices, precision=6))
    return BetaSweep(tuple(betas), option.tranches, strikes, np.array(prices).T, marg_err, resid)
