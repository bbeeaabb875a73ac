"""Semi-analytic tranche pricing under the conditional normal approximation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .marketdata import TrancheDef
from .recovery import RecoverySpec, term_moments

_INV_SQRT_2PI = 0.3989422804014327


class PricingError(ValueError):
    pass


@dataclass(frozen=True)
class CondLossMoments:
    """Conditional portfolio loss / recovered-notional moments, one entry per grid node."""

    mu_L: np.ndarray
    var_L: np.ndarray
    mu_A: np.ndarray
    var_A: np.ndarray


def conditional_moments(weights, cond_prob, spec: RecoverySpec, scale=1.0) -> CondLossMoments:
    """Loss and amortization moments given conditional default probabilities.

    ``cond_prob`` has shape (..., n_names); reductions run over the last axis.
    """
    w = np.asarray(weights, dtype=float)
    P = np.asarray(cond_prob, dtype=float)
    tm = term_moments(spec, P, scale)
    m, v = tm.mu_0t, tm.var_0t
    lgd = 1.0 - m
    w2 = w * w
    mu_L = (P * lgd) @ w
    var_L = (P * (v + (1.0 - P) * lgd * lgd)) @ w2
    mu_A = (P * m) @ w
    var_A = (P * (v + (1.0 - P) * m * m)) @ w2
    return CondLossMoments(mu_L, var_L, mu_A, var_A)


def base_tranche_cond_etl(mu, var, K):
    """E[min(L, K)] for L ~ N(mu, var); degenerate var gives min(mu, K).

    Losses never exceed the total notional, so strikes at or above 1 return
    mu exactly instead of the normal tail integral.
    """
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    K = np.asarray(K, dtype=float)
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    z = (K - mu) / safe
    val = K + (mu - K) * ndtr(z) - sd * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    val = np.where(pos, val, np.minimum(mu, K))
    return np.where(K >= 1.0, mu, val)


def base_tranche_partials(mu, var, K):
    """Partial derivatives of ``base_tranche_cond_etl`` in mu and var."""
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    z = (K - mu) / safe
    d_mu = np.where(pos, ndtr(z), (mu < K).astype(float))
    d_var = np.where(pos, -_INV_SQRT_2PI * np.exp(-0.5 * z * z) / (2.0 * safe), 0.0)
    top = K >= 1.0
    return np.where(top, 1.0, d_mu), np.where(top, 0.0, d_var)


def cond_tranche_loss(m: CondLossMoments, attach: float, detach: float):
    """Conditional tranche ETL (fraction of tranche notional) at each node."""
    hi = base_tranche_cond_etl(m.mu_L, m.var_L, detach)
    lo = base_tranche_cond_etl(m.mu_L, m.var_L, attach) if attach > 0 else 0.0
    return (hi - lo) / (detach - attach)


def cond_tranche_amort(m: CondLossMoments, attach: float, detach: float):
    """Conditional tranche amortization; recovered notional writes down from the top."""
    hi = base_tranche_cond_etl(m.mu_A, m.var_A, 1.0 - attach)
    lo = base_tranche_cond_etl(m.mu_A, m.var_A, 1.0 - detach) if detach < 1 else 0.0
    return (hi - lo) / (detach - attach)


def etl(q, moments: CondLossMoments, attach: float, detach: float) -> float:
    """Unconditional tranche ETL: conditional ETL integrated over factor weights ``q``."""
    return float(np.asarray(q) @ cond_tranche_loss(moments, attach, detach))


def eta(q, moments: CondLossMoments, attach: float, detach: float) -> float:
    return float(np.asarray(q) @ cond_tranche_amort(moments, attach, detach))


@dataclass(frozen=True)
class EtlCurve:
    tranches: tuple[TrancheDef, ...]
    horizons: tuple[float, ...]
    etl: np.ndarray = field(repr=False)  # (n_tranches, n_horizons)
    eta: np.ndarray = field(repr=False)

    def rows(self):
        for k, tr in enumerate(self.tranches):
            for h, t in enumerate(self.horizons):
                yield tr.attach, tr.detach, t, self.etl[k, h], self.eta[k, h]

    def to_csv(self) -> str:
        lines = ["attach,detach,horizon,etl,eta"]
        lines += [f"{a:.6f},{d:.6f},{t:g},{e:.6f},{m:.6f}" for a, d, t, e, m in self.rows()]
        return "\n".join(lines) + "\n"


def tranche_pv(
    times: Sequence[float],
    etl_curve,
    eta_curve,
    coupon: float,
    discount: Callable[[np.ndarray], np.ndarray] | None,
):
    """Protection leg, premium leg and protection-buyer PV of a tranche.

    ``etl_curve``/``eta_curve`` are tranche-notional fractions at ``times``
    (payment dates, start implied at 0 with zero loss).
    """
    if discount is None:
        raise PricingError("missing discount factors")
    t = np.concatenate(([0.0], np.asarray(times, dtype=float)))
    L = np.concatenate(([0.0], np.asarray(etl_curve, dtype=float)))
    A = np.concatenate(([0.0], np.asarray(eta_curve, dtype=float)))
    if np.any(np.diff(t) <= 0):
        raise PricingError("payment times must be ascending and positive")
    if np.any(np.diff(L) < -1e-14) or np.any(np.diff(A) < -1e-14):
        raise PricingError("ETL/ETA curves must be non-decreasing")
    mid = 0.5 * (t[1:] + t[:-1])
    df_mid = np.asarray(discount(mid), dtype=float)
    df_pay = np.asarray(discount(t[1:]), dtype=float)
    if df_mid.shape != mid.shape or df_pay.shape != mid.shape or np.any(~np.isfinite(df_mid)) or np.any(~np.isfinite(df_pay)):
        raise PricingError("missing discount factors")
    protection = float(df_mid @ np.diff(L))
    outstanding = 1.0 - L - A
    avg_out = 0.5 * (outstanding[1:] + outstanding[:-1])
    premium = float(coupon * (df_pay * np.diff(t)) @ avg_out)
    return protection, premium, protection - premium


def flat_discount(rate: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    return lambda t: np.exp(-rate * np.asarray(t, dtype=float))
