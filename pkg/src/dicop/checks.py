"""Invariant suite run by the ``check`` command.

Each check returns a :class:`CheckResult` holding the measured value and the
tolerance it was held to, so the report doubles as a diagnostic table.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .copula import FactorMarginal, check_dominance
from .lattice import OuParams, forward_induct
from .marketdata import EtlTargets, TrancheDef
from .markov import build_chain, validate_chain
from .model import ModelState, build_model
from .pricer import base_tranche_cond_etl
from .recovery import spot_moments, term_moments

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name},{status},{self.value:.6e},{self.tol:.6e}"


def _le(name: str, value: float, tol: float) -> CheckResult:
    return CheckResult(name, float(value), tol, bool(value <= tol))


def weights_sum(model: ModelState) -> CheckResult:
    return _le("weights_sum_to_one", abs(model.weights.sum() - 1.0), 1e-12)


def index_row_exact(model: ModelState, targets: EtlTargets) -> CheckResult:
    k = targets.index_row()
    if k is None:
        return CheckResult("index_row_exact", 0.0, 1e-6, True)
    full = TrancheDef(0.0, 1.0)
    err = max(abs(model.tranche_etl(full, t) - targets.etl[k, h]) for h, t in enumerate(targets.horizons))
    return _le("index_row_exact", err, 1e-6)


def tranche_residuals(model: ModelState, targets: EtlTargets, tol: float = 0.013) -> CheckResult:
    curve = model.etl_curve(targets.tranches)
    return _le("tranche_residual_max", np.max(np.abs(curve.etl - targets.etl)), tol)


def cdf_dominance(model: ModelState) -> CheckResult:
    return _le("cdf_dominance", check_dominance(model.marginals), 1e-10)


def single_name_consistency(model: ModelState) -> CheckResult:
    err = 0.0
    for f in model.fits:
        implied = f.marginal.probs @ f.cond_probs()
        err = max(err, float(np.max(np.abs(implied - f.p_adj))))
    return _le("single_name_probability", err, 1e-10)


def beta_monotone(model: ModelState) -> CheckResult:
    drop = 0.0
    for a, b in zip(model.fits, model.fits[1:]):
        drop = max(drop, float(np.max(a.cond.beta - b.cond.beta)), float(np.max(b.cond.c - a.cond.c)))
    return _le("beta_up_c_down", max(drop, 0.0), 1e-12)


def cond_prob_monotone(model: ModelState) -> CheckResult:
    worst = 0.0
    for f in model.fits:
        P = f.cond_probs()
        worst = max(worst, float(np.max(-np.diff(P, axis=0))), float(np.max(P - 1.0)), float(np.max(-P)))
    return _le("cond_prob_monotone_in_x", max(worst, 0.0), 1e-12)


def el_preserved(model: ModelState) -> CheckResult:
    return _le("name_el_preserved", np.max(np.abs(model.model_el() - model.curve_el())), 1e-10)


def recovery_bounds(model: ModelState) -> CheckResult:
    p = np.linspace(0.0, 1.0, 2001)
    mu, var = spot_moments(model.spec, p)
    bad = max(float(np.max(var - mu * (1 - mu))), float(np.max(-var)))
    scaled = np.outer(model.scale, model.spec.mu(p))
    bad = max(bad, float(np.max(scaled - 1.0)), float(np.max(-scaled)))
    tm = term_moments(model.spec, p[1:])
    bad = max(bad, float(np.max(tm.var_0t - tm.mu_0t * (1 - tm.mu_0t))))
    return _le("recovery_moment_bounds", max(bad, 0.0), 1e-12)


def term_recovery_gap(model: ModelState, tol: float = 0.05) -> CheckResult:
    rc = np.array([c.curve_recovery for c in model.curves])
    gap = max(float(np.max(np.abs(f.term_recovery - rc))) for f in model.fits)
    return _le("term_recovery_vs_curve", gap, tol)


def tranche_sum_rule(model: ModelState, tranches: Sequence[TrancheDef]) -> CheckResult:
    """Width-weighted adjacent tranche ETLs telescope to the 0-100% ETL."""
    pts = sorted({0.0, 1.0, *(tr.attach for tr in tranches), *(tr.detach for tr in tranches)})
    adj = [TrancheDef(a, b) for a, b in zip(pts, pts[1:])]
    full = TrancheDef(0.0, 1.0)
    err = 0.0
    for t in model.horizons:
        s = sum(model.tranche_etl(tr, t) * tr.width for tr in adj)
        err = max(err, abs(s - model.tranche_etl(full, t)))
    return _le("tranche_sum_rule", err, 1e-12)


def base_etl_monotone(model: ModelState) -> CheckResult:
    K = np.linspace(0.0, 1.0, 201)
    worst = 0.0
    for t in model.horizons:
        m = model.moments(t)
        base = np.array([model.fit_at(t).marginal.probs @ base_tranche_cond_etl(m.mu_L, m.var_L, k) for k in K])
        worst = max(worst, float(np.max(-np.diff(base))))
    return _le("base_etl_monotone_in_K", max(worst, 0.0), 1e-14)


def chains_valid(model: ModelState) -> list[CheckResult]:
    out = []
    for method in ("comono", "maxent"):
        chain = build_chain(model.marginals, method)
        d = validate_chain(chain, model.marginals)
        worst = max(d.row_sum_error, d.marginal_error, d.support_violation, d.negative_entries)
        out.append(_le(f"chain_{method}_valid", worst, 1e-10))
    return out


def lattice_invariance(model: ModelState, params: OuParams | None = None, beta: float = 0.5) -> list[CheckResult]:
    chain = build_chain(model.marginals, "maxent")
    lat = forward_induct(chain, params or OuParams(), beta)
    err = max(float(np.max(np.abs(lat.x_marginal(k) - q))) for k, q in enumerate(chain.marginals()[1:]))
    return [_le("lattice_x_marginal", err, 1e-8), _le("lattice_threshold_residual", lat.max_threshold_residual, 1e-8)]


def perturb_last(marginals: Sequence[FactorMarginal], shift: float = 0.05) -> list[FactorMarginal]:
    """Move a slice of the last marginal's bulk mass to the top node (dominance kept)."""
    last = marginals[-1]
    q = last.probs.copy()
    j = int(np.argmax(q[:-1]))
    moved = shift * q[j]
    q[j] -= moved
    q[-1] += moved
    return [*marginals[:-1], FactorMarginal(last.grid, q, last.horizon)]


def time_locality(model: ModelState, tranches: Sequence[TrancheDef]) -> CheckResult:
    """Perturbing the last marginal must leave earlier ETLs bit-identical."""
    alt = build_model(model.curves, model.spec, perturb_last(model.marginals))
    worst = 0.0
    for t in model.horizons[:-1]:
        a = np.array([model.tranche_etl(tr, t) for tr in tranches])
        b = np.array([alt.tranche_etl(tr, t) for tr in tranches])
        worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult("time_locality", worst, 0.0, worst == 0.0)


def run_checks(model: ModelState, targets: EtlTargets | None = None,
               params: OuParams | None = None) -> list[CheckResult]:
    """Full invariant suite; targets enable the fit checks."""
    tranches = targets.tranches if targets is not None else (TrancheDef(0.0, 1.0),)
    steps: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: weights_sum(model),
        lambda: cdf_dominance(model),
        lambda: single_name_consistency(model),
        lambda: beta_monotone(model),
        lambda: cond_prob_monotone(model),
        lambda: el_preserved(model),
        lambda: recovery_bounds(model),
        lambda: term_recovery_gap(model),
        lambda: tranche_sum_rule(model, tranches),
        lambda: base_etl_monotone(model),
        lambda: chains_valid(model),
        lambda: lattice_invariance(model, params),
        lambda: time_locality(model, tranches),
    ]
    if targets is not None:
        steps[1:1] = [lambda: index_row_exact(model, targets), lambda: tranche_residuals(model, targets)]
    out: list[CheckResult] = []
    for step in steps:
        res = step()
        out.extend(res if isinstance(res, list) else [res])
        log.info("%s", out[-1].line())
    return out
