"""Consistent stochastic recovery.

Spot recovery moments are functions of the (conditional) default probability:
``mu(p)`` is piecewise linear and ``var(p) = alpha * mu * (1 - mu)``. Term
moments over (0, t) are averages of the spot moments over [0, p(t)], so they
depend on p(t) only and are evaluated exactly segment by segment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RecoveryError(ValueError):
    pass


# Decreasing trend with a local peak at p = 0.15.
DEFAULT_KNOTS = (
    (0.00, 0.55),
    (0.05, 0.50),
    (0.10, 0.44),
    (0.15, 0.50),
    (0.20, 0.42),
    (0.30, 0.36),
    (0.50, 0.28),
    (0.75, 0.20),
    (1.00, 0.12),
)
DEFAULT_ALPHA = 0.25


@dataclass(frozen=True)
class RecoverySpec:
    """Piecewise-linear spot mean over p in [0, 1] plus variance fraction ``alpha``."""

    p_knots: np.ndarray = field(repr=False)
    mu_knots: np.ndarray = field(repr=False)
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        p = np.asarray(self.p_knots, dtype=float)
        m = np.asarray(self.mu_knots, dtype=float)
        object.__setattr__(self, "p_knots", p)
        object.__setattr__(self, "mu_knots", m)
        if p.ndim != 1 or p.shape != m.shape or p.size < 2:
            raise RecoveryError("need matching 1-D knot arrays with at least two knots")
        if p[0] != 0.0 or p[-1] != 1.0 or np.any(np.diff(p) <= 0):
            raise RecoveryError("knots must be ascending and span [0, 1]")
        if np.any(m < 0) or np.any(m > 1):
            raise RecoveryError("spot mean outside [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise RecoveryError("alpha outside [0, 1]")
        # cumulative integrals of mu and mu^2 at the knots
        d = np.diff(p)
        m0, k = m[:-1], np.diff(m) / d
        i1 = m0 * d + 0.5 * k * d**2
        i2 = m0**2 * d + m0 * k * d**2 + k**2 * d**3 / 3.0
        object.__setattr__(self, "_slope", k)
        object.__setattr__(self, "_cum1", np.concatenate(([0.0], np.cumsum(i1))))
        object.__setattr__(self, "_cum2", np.concatenate(([0.0], np.cumsum(i2))))

    @classmethod
    def default(cls) -> "RecoverySpec":
        p, m = zip(*DEFAULT_KNOTS)
        return cls(np.array(p), np.array(m), DEFAULT_ALPHA)

    @property
    def max_scale(self) -> float:
        """Largest name scale that keeps scale * mu(p) <= 1."""
        top = float(self.mu_knots.max())
        return np.inf if top == 0 else 1.0 / top

    def mu(self, p):
        return np.interp(p, self.p_knots, self.mu_knots)

    def integrals(self, p):
        """Return (int_0^p mu, int_0^p mu^2), exact for the linear segments."""
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        seg = np.clip(np.searchsorted(self.p_knots, p, side="right") - 1, 0, len(self._slope) - 1)
        d = p - self.p_knots[seg]
        m0 = self.mu_knots[seg]
        k = self._slope[seg]
        i1 = self._cum1[seg] + m0 * d + 0.5 * k * d**2
        i2 = self._cum2[seg] + m0**2 * d + m0 * k * d**2 + k**2 * d**3 / 3.0
        return i1, i2

    def to_json(self) -> str:
        doc = {"knots": [[float(a), float(b)] for a, b in zip(self.p_knots, self.mu_knots)], "alpha": self.alpha}
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RecoverySpec":
        doc = json.loads(text)
        try:
            knots = np.array(doc["knots"], dtype=float)
            return cls(knots[:, 0], knots[:, 1], float(doc.get("alpha", DEFAULT_ALPHA)))
        except (KeyError, IndexError, TypeError) as exc:
            raise RecoveryError(f"malformed recovery spec: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RecoverySpec":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TermRecoveryMoments:
    mu_0t: np.ndarray
    var_0t: np.ndarray


def spot_moments(spec: RecoverySpec, p, scale=1.0):
    """Spot mean and variance at default probability ``p`` for a name scale."""
    m = np.asarray(scale) * spec.mu(p)
    return m, spec.alpha * m * (1.0 - m)


def term_moments(spec: RecoverySpec, p_t, scale=1.0) -> TermRecoveryMoments:
    """Term recovery mean/variance for default anywhere in (0, t) given p(t).

    Broadcasts over ``p_t`` and ``scale``. ``p_t = 0`` returns the spot moments
    at p = 0 (right limit).
    """
    p_t = np.asarray(p_t, dtype=float)
    s = np.asarray(scale, dtype=float)
    i1, i2 = spec.integrals(p_t)
    a = spec.alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = s * i1 / p_t
        second = (s * s * (1.0 - a) * i2 + a * s * i1) / p_t
    m0, v0 = spot_moments(spec, 0.0, s)
    zero = p_t <= 0.0
    mean = np.where(zero, m0, mean)
    var = np.where(zero, v0, second - mean * mean)
    var = np.clip(var, 0.0, mean * (1.0 - mean))
    return TermRecoveryMoments(mean, var)


def segment_moments(spec: RecoverySpec, p1, p2, scale=1.0) -> TermRecoveryMoments:
    """Recovery moments for default between two times with p(t1)=p1 < p(t2)=p2."""
    i1a, i2a = spec.integrals(p1)
    i1b, i2b = spec.integrals(p2)
    s, a = np.asarray(scale, dtype=float), spec.alpha
    dp = np.asarray(p2, dtype=float) - np.asarray(p1, dtype=float)
    mean = s * (i1b - i1a) / dp
    second = (s * s * (1.0 - a) * (i2b - i2a) + a * s * (i1b - i1a)) / dp
    return TermRecoveryMoments(mean, second - mean * mean)


def unconditional_term_recovery(spec: RecoverySpec, q, cond_prob, scale=1.0):
    """Default-weighted average of the conditional term recovery over the factor.

    ``cond_prob`` has shape (J,) or (J, n_names); ``q`` has shape (J,).
    """
    q = np.asarray(q, dtype=float)
    P = np.asarray(cond_prob, dtype=float)
    tm = term_moments(spec, P, scale)
    num = np.tensordot(q, tm.mu_0t * P, axes=(0, 0))
    den = np.tensordot(q, P, axes=(0, 0))
    m0 = np.asarray(scale) * spec.mu(0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, m0)


def calibrate_name_scale(spec: RecoverySpec, q, cond_prob, curve_recovery):
    """Name scales matching the unconditional term recovery to curve recovery.

    The term mean is linear in the scale, so the root is the ratio of the
    target to the unscaled recovery; it is clipped to [0, max_scale].
    Returns (scale, clipped_mask).
    """
    base = unconditional_term_recovery(spec, q, cond_prob, 1.0)
    with np.errstate(divide="ignore"):
        s = np.where(base > 0, np.asarray(curve_recovery) / base, 0.0)
    clipped = s > spec.max_scale
    return np.minimum(s, spec.max_scale), clipped


def two_point_levels(mu, var):
    """Lower/upper support points of the two-point law with P(upper) = mu."""
    mu = np.asarray(mu, dtype=float)
    var = np.maximum(np.asarray(var, dtype=float), 0.0)
    inner = (mu > 0) & (mu < 1)
    safe = np.where(inner, mu, 0.5)
    # var / mu stays finite for tiny mu because var <= mu (1 - mu)
    lo = np.where(inner, mu - np.sqrt(var * safe / (1.0 - safe)), mu)
    hi = np.where(inner, mu + np.sqrt(var / safe * (1.0 - safe)), mu)
    return np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)


def two_point_draw(mu, var, u):
    """Recovery draw with exact mean ``mu`` and variance ``var`` from uniform ``u``."""
    lo, hi = two_point_levels(mu, var)
    return np.where(np.asarray(u) < mu, hi, lo)
