"""Generate the synthetic 122-name portfolio and ETL targets shipped in dicop/data.

Regular names follow p_i(t) = 1 - exp(-lam_i g(t)) with lognormal lam_i; g(t)
is root-solved per horizon so the portfolio expected loss equals the 0-100%
target exactly. A handful of distressed names carry an increasing gamma ramp.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from dicop.marketdata import CreditCurve, save_curves
from dicop.recovery import RecoverySpec

HORIZONS = (5.0, 7.0, 10.0)
TRANCHES = [(0.0, 0.026), (0.026, 0.067), (0.067, 0.098), (0.098, 0.149),
            (0.149, 0.303), (0.303, 0.61), (0.0, 1.0)]
ETL_PCT = [
    [83.51, 87.23, 91.12],
    [57.22, 64.36, 71.28],
    [30.05, 41.47, 54.94],
    [18.02, 26.07, 36.49],
    [4.87, 7.20, 10.57],
    [4.05, 6.24, 8.54],
    [8.72, 10.96, 13.47],
]
N_NAMES = 122
DISTRESSED = [  # p(5), p(7), p(10), curve recovery
    (0.55, 0.62, 0.70, 0.30),
    (0.65, 0.71, 0.78, 0.25),
]
GAMMA = 0.9
GAMMA_RAMP = (0.9, 0.9, 0.9)
HAZARD_SIGMA = 0.3  # dispersion of the lognormal hazard multipliers
SEED = 20080915


def build(seed: int = SEED, distressed=DISTRESSED, gamma_ramp=GAMMA_RAMP, sigma=HAZARD_SIGMA) -> list[CreditCurve]:
    rng = np.random.default_rng(seed)
    n_reg = N_NAMES - len(distressed)
    w = 1.0 / N_NAMES
    lam = rng.lognormal(mean=0.0, sigma=sigma, size=n_reg)
    lam = np.sort(lam / lam.mean())
    rec = np.where(rng.random(n_reg) < 0.1, 0.35, 0.40)
    el_target = [row for row in np.array(ETL_PCT[-1]) / 100.0]
    dist = np.array(distressed).reshape(-1, 4)
    probs = np.zeros((n_reg, len(HORIZONS)))
    for h, target in enumerate(el_target):
        el_dist = w * np.sum(dist[:, h] * (1.0 - dist[:, 3]))

        def gap(g):
            return w * np.sum(-np.expm1(-lam * g) * (1.0 - rec)) + el_dist - target

        g = brentq(gap, 0.0, 50.0, xtol=1e-15, rtol=1e-15)
        probs[:, h] = -np.expm1(-lam * g)
    curves = []
    for i in range(n_reg):
        curves.append(CreditCurve(f"N{i + 1:03d}", HORIZONS, tuple(float(p) for p in probs[i]),
                                  float(rec[i]), w, (GAMMA,) * len(HORIZONS)))
    for k, (p5, p7, p10, r) in enumerate(distressed):
        curves.append(CreditCurve(f"D{k + 1:03d}", HORIZONS, (p5, p7, p10), r, w, tuple(gamma_ramp)))
    return curves


def targets_doc() -> dict:
    return {
        "horizons": list(HORIZONS),
        "tranches": [list(t) for t in TRANCHES],
        "etl": [[round(v / 100.0, 6) for v in row] for row in ETL_PCT],
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src/dicop/data")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    save_curves(build(), args.out / "portfolio.csv")
    (args.out / "targets.json").write_text(json.dumps(targets_doc(), indent=2) + "\n")
    RecoverySpec.default().save(args.out / "recovery.json")


if __name__ == "__main__":
    main()
