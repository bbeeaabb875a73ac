"""Calibrated model state: marginals plus per-name conditional curves.

Everything here is a deterministic function of the factor marginals, the
credit curves and the recovery spec, so downstream commands rebuild it from a
marginals file instead of persisting betas.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .copula import BetaDiagnostics, ConditionalCurve, FactorMarginal, calibrate_beta, conditional_default_prob
from .marketdata import CreditCurve, MarketDataError, TrancheDef, el_preserving_prob
from .pricer import CondLossMoments, EtlCurve, conditional_moments, cond_tranche_amort, cond_tranche_loss
from .recovery import RecoverySpec, calibrate_name_scale, unconditional_term_recovery

log = logging.getLogger(__name__)

ANCHOR_TENOR = 5.0
EL_FIXED_POINT_TOL = 1e-15
EL_FIXED_POINT_MAX_ITER = 100


@dataclass
class HorizonFit:
    horizon: float
    marginal: FactorMarginal
    cond: ConditionalCurve
    p_adj: np.ndarray  # model default probabilities after EL-preserving adjustment
    term_recovery: np.ndarray  # unconditional R_i(0, t)
    beta_diag: BetaDiagnostics
    el_iterations: int = 0

    def cond_probs(self) -> np.ndarray:
        """(J, n_names) conditional default probabilities on the grid."""
        return conditional_default_prob(self.cond, self.marginal.grid)


def name_arrays(curves: Sequence[CreditCurve], t: float):
    p = np.array([c.prob_at(t) for c in curves])
    g = np.array([c.gamma_at(t) for c in curves])
    return p, g


def anchor_scale(curves, spec: RecoverySpec, marginal: FactorMarginal):
    """Name scales from the anchor-tenor marginal (curve probabilities unadjusted)."""
    p, g = name_arrays(curves, marginal.horizon)
    cond, _ = calibrate_beta(p, g, marginal)
    P = conditional_default_prob(cond, marginal.grid)
    rc = np.array([c.curve_recovery for c in curves])
    scale, clipped = calibrate_name_scale(spec, marginal.probs, P, rc)
    if clipped.any():
        log.warning("name scale clipped at max for %d name(s)", int(clipped.sum()))
    return scale


def fit_horizon(
    curves: Sequence[CreditCurve],
    spec: RecoverySpec,
    marginal: FactorMarginal,
    scale: np.ndarray,
    prev: HorizonFit | None = None,
) -> HorizonFit:
    """Calibrate betas at one horizon, adjusting p(t) so each name keeps its curve EL."""
    t = marginal.horizon
    p_mkt, gamma = name_arrays(curves, t)
    rc = np.array([c.curve_recovery for c in curves])
    floor_beta = prev.cond.beta if prev is not None else None
    floor_p = prev.p_adj if prev is not None else 0.0
    p = np.maximum(p_mkt, floor_p)
    it = 0
    for it in range(1, EL_FIXED_POINT_MAX_ITER + 1):
        cond, diag = calibrate_beta(p, gamma, marginal, floor_beta)
        P = conditional_default_prob(cond, marginal.grid)
        R = unconditional_term_recovery(spec, marginal.probs, P, scale)
        p_new = np.maximum(el_preserving_prob(p_mkt, rc, R), floor_p)
        if np.any(p_new >= 1.0):
            bad = int(np.flatnonzero(p_new >= 1.0)[0])
            raise MarketDataError(f"{curves[bad].name}: expected loss not attainable at {t:g}Y")
        done = np.max(np.abs(p_new - p)) <= EL_FIXED_POINT_TOL
        p = p_new
        if done:
            break
    cond, diag = calibrate_beta(p, gamma, marginal, floor_beta)
    P = conditional_default_prob(cond, marginal.grid)
    R = unconditional_term_recovery(spec, marginal.probs, P, scale)
    return HorizonFit(t, marginal, cond, p, R, diag, it)


@dataclass
class ModelState:
    curves: list[CreditCurve]
    spec: RecoverySpec
    scale: np.ndarray
    fits: list[HorizonFit] = field(default_factory=list)

    @property
    def horizons(self) -> tuple[float, ...]:
        return tuple(f.horizon for f in self.fits)

    @property
    def marginals(self) -> list[FactorMarginal]:
        return [f.marginal for f in self.fits]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.curves])

    @property
    def grid(self) -> np.ndarray:
        return self.fits[0].marginal.grid

    def fit_at(self, t: float) -> HorizonFit:
        for f in self.fits:
            if abs(f.horizon - t) < 1e-12:
                return f
        raise KeyError(f"no calibrated horizon {t}")

    def moments(self, t: float) -> CondLossMoments:
        return conditional_moments(self.weights, self.fit_at(t).cond_probs(), self.spec, self.scale)

    def tranche_etl(self, tranche: TrancheDef, t: float) -> float:
        f = self.fit_at(t)
        return float(f.marginal.probs @ cond_tranche_loss(self.moments(t), tranche.attach, tranche.detach))

    def etl_curve(self, tranches: Sequence[TrancheDef]) -> EtlCurve:
        etl = np.zeros((len(tranches), len(self.fits)))
        eta = np.zeros_like(etl)
        for h, f in enumerate(self.fits):
            m = conditional_moments(self.weights, f.cond_probs(), self.spec, self.scale)
            for k, tr in enumerate(tranches):
                etl[k, h] = f.marginal.probs @ cond_tranche_loss(m, tr.attach, tr.detach)
                eta[k, h] = f.marginal.probs @ cond_tranche_amort(m, tr.attach, tr.detach)
        return EtlCurve(tuple(tranches), self.horizons, etl, eta)

    def curve_el(self) -> np.ndarray:
        """(n_horizons, n_names) single-name expected loss implied by the input curves."""
        return np.array([[c.expected_loss(t) for c in self.curves] for t in self.horizons])

    def model_el(self) -> np.ndarray:
        return np.array([f.p_adj * (1.0 - f.term_recovery) for f in self.fits])


def build_model(
    curves: Sequence[CreditCurve],
    spec: RecoverySpec,
    marginals: Sequence[FactorMarginal],
    anchor: float = ANCHOR_TENOR,
) -> ModelState:
    """Rebuild conditional curves for a family of marginals (ascending horizons)."""
    marginals = sorted(marginals, key=lambda m: m.horizon)
    anchor_m = min(marginals, key=lambda m: abs(m.horizon - anchor))
    scale = anchor_scale(curves, spec, anchor_m)
    state = ModelState(list(curves), spec, scale)
    prev = None
    for m in marginals:
        prev = fit_horizon(curves, spec, m, scale, prev)
        state.fits.append(prev)
    return state
