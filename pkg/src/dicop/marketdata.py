"""Portfolio, curve and ETL-target ingestion.

Curve files are line-oriented, comma delimited::

    # name, t1:p1, t2:p2, ..., recovery, weight, gamma
    ACME,5:0.101,7:0.139,10:0.192,0.40,0.0081967,0.9

``gamma`` is either a constant or a term structure ``5:0.3;7:0.6;10:0.9``.
Targets are a single JSON document (see :func:`load_targets`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WEIGHT_TOL = 1e-6
WEIGHT_SUM_TOL = 1e-12


class MarketDataError(ValueError):
    """Raised for schema or invariant violations in input data."""


@dataclass(frozen=True)
class CreditCurve:
    name: str
    horizons: tuple[float, ...]
    default_prob: tuple[float, ...]
    curve_recovery: float
    weight: float
    gamma: tuple[float, ...]  # one value per horizon

    def __post_init__(self):
        if len(self.horizons) != len(self.default_prob) or not self.horizons:
            raise MarketDataError(f"{self.name}: horizons/default_prob length mismatch")
        if len(self.gamma) != len(self.horizons):
            raise MarketDataError(f"{self.name}: gamma needs one value per horizon")
        h = np.asarray(self.horizons)
        p = np.asarray(self.default_prob)
        if np.any(h <= 0) or np.any(np.diff(h) <= 0):
            raise MarketDataError(f"{self.name}: horizons must be positive and ascending")
        if np.any(p < 0) or np.any(p >= 1):
            raise MarketDataError(f"{self.name}: default_prob outside [0,1)")
        if np.any(np.diff(p) < 0):
            raise MarketDataError(f"{self.name}: default_prob not monotone")
        if not 0 <= self.curve_recovery < 1:
            raise MarketDataError(f"{self.name}: curve_recovery outside [0,1)")
        if not self.weight > 0:
            raise MarketDataError(f"{self.name}: weight must be positive")
        g = np.asarray(self.gamma)
        if np.any(g < 0) or np.any(g > 1):
            raise MarketDataError(f"{self.name}: gamma outside [0,1]")
        if np.any(np.diff(g) < 0):
            raise MarketDataError(f"{self.name}: gamma term structure not monotone")

    def prob(self, t: float) -> float:
        """Cumulative default probability, linear in cumulative hazard between quotes."""
        if t <= 0:
            return 0.0
        h = np.concatenate(([0.0], self.horizons))
        haz = np.concatenate(([0.0], -np.log1p(-np.asarray(self.default_prob))))
        if t <= h[-1]:
            H = np.interp(t, h, haz)
        else:
            slope = (haz[-1] - haz[-2]) / (h[-1] - h[-2])
            H = haz[-1] + slope * (t - h[-1])
        return float(-np.expm1(-H))

    def prob_at(self, t: float) -> float:
        """Quoted probability if ``t`` is a curve horizon, otherwise interpolated."""
        for hh, pp in zip(self.horizons, self.default_prob):
            if math.isclose(hh, t, rel_tol=0, abs_tol=1e-12):
                return pp
        return self.prob(t)

    def gamma_at(self, t: float) -> float:
        idx = int(np.searchsorted(self.horizons, t - 1e-12))
        return self.gamma[min(idx, len(self.gamma) - 1)]

    def expected_loss(self, t: float) -> float:
        return self.prob_at(t) * (1.0 - self.curve_recovery)


@dataclass(frozen=True)
class TrancheDef:
    attach: float
    detach: float

    def __post_init__(self):
        if not 0 <= self.attach < self.detach <= 1:
            raise MarketDataError(f"invalid tranche [{self.attach}, {self.detach}]")

    @property
    def width(self) -> float:
        return self.detach - self.attach

    @property
    def label(self) -> str:
        return f"{100 * self.attach:.1f}%-{100 * self.detach:.1f}%"


@dataclass(frozen=True)
class EtlTargets:
    horizons: tuple[float, ...]
    tranches: tuple[TrancheDef, ...]
    etl: np.ndarray = field(repr=False)  # (n_tranches, n_horizons), fraction of tranche notional

    def __post_init__(self):
        etl = np.asarray(self.etl, dtype=float)
        object.__setattr__(self, "etl", etl)
        if etl.shape != (len(self.tranches), len(self.horizons)):
            raise MarketDataError(
                f"etl matrix shape {etl.shape} != ({len(self.tranches)}, {len(self.horizons)})"
            )
        if np.any(np.diff(self.horizons) <= 0):
            raise MarketDataError("target horizons must be ascending")
        if np.any(etl < 0) or np.any(etl > 1):
            raise MarketDataError("ETL outside [0,1]")
        bad = np.argwhere(np.diff(etl, axis=1) < 0)
        if bad.size:
            k, h = bad[0]
            raise MarketDataError(
                f"ETL not monotone in horizon for tranche {self.tranches[k].label} "
                f"between {self.horizons[h]}Y and {self.horizons[h + 1]}Y"
            )

    def index_row(self) -> int | None:
        for k, tr in enumerate(self.tranches):
            if tr.attach == 0.0 and tr.detach == 1.0:
                return k
        return None

    def column(self, horizon: float) -> np.ndarray:
        return self.etl[:, self.horizons.index(horizon)]


def check_weights(curves: Sequence[CreditCurve]) -> list[CreditCurve]:
    """Normalize weights if they sum to 1 within 1e-6, otherwise reject."""
    total = math.fsum(c.weight for c in curves)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise MarketDataError(f"portfolio weights sum to {total:.9f}, not 1")
    out = [replace(c, weight=c.weight / total) for c in curves]
    if abs(math.fsum(c.weight for c in out) - 1.0) > WEIGHT_SUM_TOL:
        raise MarketDataError("weights could not be normalized to 1")
    return out


def portfolio_expected_loss(curves: Sequence[CreditCurve], t: float) -> float:
    return math.fsum(c.weight * c.expected_loss(t) for c in curves)


def check_targets_consistent(
    targets: EtlTargets, curves: Sequence[CreditCurve], tol: float = 1e-6
) -> None:
    """The 0-100% target row must equal the curves' portfolio expected loss."""
    k = targets.index_row()
    if k is None:
        return
    for h, t in enumerate(targets.horizons):
        el = portfolio_expected_loss(curves, t)
        if abs(el - targets.etl[k, h]) > tol:
            raise MarketDataError(
                f"0-100% target {targets.etl[k, h]:.6f} at {t}Y inconsistent with "
                f"curve expected loss {el:.6f}"
            )


def _parse_term(field_: str, row: int, what: str) -> tuple[float, float]:
    try:
        t, v = field_.split(":")
        return float(t), float(v)
    except ValueError:
        raise MarketDataError(f"row {row}: malformed {what} entry {field_!r}") from None


def _parse_float(s: str, row: int, what: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise MarketDataError(f"row {row}: field {what!r} is not a number: {s!r}") from None


def parse_curve_line(line: str, row: int) -> CreditCurve:
    fields = [f.strip() for f in line.split(",")]
    if len(fields) < 5:
        raise MarketDataError(f"row {row}: expected name, t:p..., recovery, weight, gamma")
    name = fields[0]
    if not name:
        raise MarketDataError(f"row {row}: empty name")
    terms = [_parse_term(f, row, "default_prob") for f in fields[1:-3]]
    rec = _parse_float(fields[-3], row, "recovery")
    w = _parse_float(fields[-2], row, "weight")
    horizons = tuple(t for t, _ in terms)
    if ":" in fields[-1]:
        gterms = dict(_parse_term(g, row, "gamma") for g in fields[-1].split(";"))
        gt = np.array(sorted(gterms))
        gv = np.array([gterms[t] for t in gt])
        # step function: gamma at a horizon is the last quoted value at or before it
        gamma = tuple(float(gv[max(0, np.searchsorted(gt, t, side="right") - 1)]) for t in horizons)
    else:
        g = _parse_float(fields[-1], row, "gamma")
        gamma = (g,) * len(horizons)
    try:
        return CreditCurve(name, horizons, tuple(p for _, p in terms), rec, w, gamma)
    except MarketDataError as exc:
        raise MarketDataError(f"row {row}: {exc}") from None


def load_curves(path: str | Path) -> list[CreditCurve]:
    curves = []
    with open(path) as fh:
        for row, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            curves.append(parse_curve_line(line, row))
    if not curves:
        raise MarketDataError(f"{path}: no curves")
    names = [c.name for c in curves]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise MarketDataError(f"duplicate names: {', '.join(dup)}")
    if len({c.horizons for c in curves}) != 1:
        raise MarketDataError("all curves must share the same horizons")
    return check_weights(curves)


def format_curve(c: CreditCurve) -> str:
    terms = ",".join(f"{t:g}:{float(p)!r}" for t, p in zip(c.horizons, c.default_prob))
    if len(set(c.gamma)) == 1:
        gamma = repr(c.gamma[0])
    else:
        gamma = ";".join(f"{t:g}:{float(g)!r}" for t, g in zip(c.horizons, c.gamma))
    return f"{c.name},{terms},{float(c.curve_recovery)!r},{float(c.weight)!r},{gamma}"


def save_curves(curves: Iterable[CreditCurve], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# name, t1:p1, t2:p2, ..., recovery, weight, gamma\n")
        for c in curves:
            fh.write(format_curve(c) + "\n")


def load_targets(path: str | Path) -> EtlTargets:
    """Read ``{"horizons": [...], "tranches": [[a, d], ...], "etl": [[...], ...]}``.

    ``etl`` has one row per tranche and one column per horizon.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MarketDataError(f"{path}: invalid JSON ({exc})") from None
    for key in ("horizons", "tranches", "etl"):
        if key not in doc:
            raise MarketDataError(f"{path}: missing field {key!r}")
    tranches = []
    for k, tr in enumerate(doc["tranches"]):
        if len(tr) != 2:
            raise MarketDataError(f"{path}: tranche {k} must be [attach, detach]")
        tranches.append(TrancheDef(float(tr[0]), float(tr[1])))
    return EtlTargets(tuple(float(h) for h in doc["horizons"]), tuple(tranches), np.array(doc["etl"], dtype=float))


def save_targets(targets: EtlTargets, path: str | Path) -> None:
    doc = {
        "horizons": list(targets.horizons),
        "tranches": [[t.attach, t.detach] for t in targets.tranches],
        "etl": targets.etl.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_portfolio(curves_path: str | Path, targets_path: str | Path) -> tuple[list[CreditCurve], EtlTargets]:
    curves = load_curves(curves_path)
    targets = load_targets(targets_path)
    missing = [t for t in targets.horizons if t not in curves[0].horizons]
    if missing:
        raise MarketDataError(f"target horizons {missing} not quoted on the curves")
    check_targets_consistent(targets, curves)
    return curves, targets


def apply_distressed_gamma(
    curves: Sequence[CreditCurve],
    ramp: Sequence[float],
    threshold: float = 0.5,
    anchor: float = 5.0,
) -> list[CreditCurve]:
    """Give names with p(anchor) > threshold an increasing systemic fraction.

    Only names with a constant gamma are touched; explicit term structures win.
    """
    out = []
    for c in curves:
        if len(set(c.gamma)) == 1 and c.prob(anchor) > threshold:
            if len(ramp) != len(c.horizons):
                raise MarketDataError("gamma ramp needs one value per curve horizon")
            c = replace(c, gamma=tuple(float(g) for g in ramp))
        out.append(c)
    return out


def adjust_curves_preserve_el(
    curves: Sequence[CreditCurve], model_term_recovery: np.ndarray
) -> list[CreditCurve]:
    """Rescale default probabilities so p'(t)(1-R_model(t)) = p(t)(1-curve_recovery).

    ``model_term_recovery`` has shape (n_names, n_horizons) on each curve's horizons.
    """
    R = np.asarray(model_term_recovery, dtype=float)
    out = []
    for i, c in enumerate(curves):
        p_new = adjusted_probs(np.asarray(c.default_prob), c.curve_recovery, R[i])
        if np.any(p_new >= 1.0):
            raise MarketDataError(f"{c.name}: expected loss not attainable with model recovery")
        out.append(replace(c, default_prob=tuple(float(p) for p in p_new)))
    return out


def el_preserving_prob(p, curve_recovery, model_recovery):
    """p (1 - curve_recovery) / (1 - model_recovery), elementwise."""
    return np.asarray(p, dtype=float) * (1.0 - np.asarray(curve_recovery, dtype=float)) / (
        1.0 - np.asarray(model_recovery, dtype=float)
    )


def adjusted_probs(p: np.ndarray, curve_recovery, model_recovery: np.ndarray) -> np.ndarray:
    """EL-preserving probabilities along a curve with running-max monotonicity.

    ``p`` and ``model_recovery`` run over horizons on the last axis;
    ``curve_recovery`` is a scalar or one value per leading row. Values >= 1
    are returned unclamped so callers can detect infeasibility.
    """
    p = np.asarray(p, dtype=float)
    rc = np.asarray(curve_recovery, dtype=float)
    if p.ndim > 1 and rc.ndim == 1:
        rc = rc[:, None]
    return np.maximum.accumulate(el_preserving_prob(p, rc, model_recovery), axis=-1)
