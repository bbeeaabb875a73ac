"""Report figures rendered straight to image files.

Every function takes the result objects produced elsewhere in the package,
writes one figure and returns the path. The Agg backend is forced so the CLI
works on headless machines.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .calibrate import CalibrationResult  # noqa: E402
from .copula import FactorMarginal  # noqa: E402
from .lattice import BetaSweep  # noqa: E402
from .simulate import SimResult  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cdfs(marginals: Sequence[FactorMarginal], path: str | Path) -> Path:
    """Factor CDFs per horizon on a log x axis (non-crossing check by eye)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in marginals:
            x = np.maximum(m.grid, m.grid[1] if m.grid.size > 1 else 1e-3)
            ax.step(x, m.cdf, where="post", label=f"{m.horizon:g}Y")
        ax.set_xscale("log")
        ax.set_xlabel("factor level x")
        ax.set_ylabel("F(x, t)")
        ax.set_ylim(0.0, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_calibration(result: CalibrationResult, path: str | Path) -> Path:
    """Target against model ETL, one panel per horizon."""
    reps = result.reports
    labels = [tr.label for tr in result.targets.tranches]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(reps), figsize=(3.4 * len(reps), 3.8), sharey=True, squeeze=False)
        pos = np.arange(len(labels))
        for ax, rep in zip(axes[0], reps):
            ax.bar(pos - 0.2, rep.target * 100, width=0.4, label="input")
            ax.bar(pos + 0.2, rep.model * 100, width=0.4, label="model")
            ax.set_xticks(pos, labels, rotation=60, ha="right")
            ax.set_title(f"{rep.horizon:g}Y")
        axes[0][0].set_ylabel("ETL (%)")
        axes[0][0].legend()
        return _save(fig, path)


def plot_mc_vs_analytic(sim: SimResult, analytic: np.ndarray, path: str | Path) -> Path:
    """MC minus semi-analytic ETL per cell with two-standard-error bars."""
    diff = (sim.etl - analytic) * 100
    err = 2 * sim.etl_se * 100
    labels = [tr.label for tr in sim.tranches]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pos = np.arange(len(labels))
        width = 0.8 / len(sim.horizons)
        for h, t in enumerate(sim.horizons):
            ax.errorbar(pos + (h - (len(sim.horizons) - 1) / 2) * width, diff[:, h], yerr=err[:, h],
                        fmt="o", ms=4, capsize=2, label=f"{t:g}Y")
        ax.axhline(0.0, color="k", lw=0.8)
        for lim in (-0.1, 0.1):
            ax.axhline(lim, color="grey", ls="--", lw=0.8)
        ax.set_xticks(pos, labels, rotation=45, ha="right")
        ax.set_ylabel("MC - semi-analytic ETL (%)")
        ax.legend()
        return _save(fig, path)


def plot_name_el(curve_el: np.ndarray, sim: SimResult, path: str | Path) -> Path:
    """Simulated against curve single-name expected loss."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for h, t in enumerate(sim.horizons):
            ax.scatter(curve_el[h] * 100, sim.name_el[h] * 100, s=8, label=f"{t:g}Y")
        hi = max(float(curve_el.max()), float(sim.name_el.max())) * 100 * 1.05
        ax.plot([0, hi], [0, hi], color="k", lw=0.8)
        ax.set_xlabel("curve EL (%)")
        ax.set_ylabel("simulated EL (%)")
        ax.legend()
        return _save(fig, path)


def plot_beta_sweep(sweep: BetaSweep, path: str | Path) -> Path:
    """Option price per tranche as a function of the mixing weight."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, tr in enumerate(sweep.tranches):
            ax.plot(sweep.betas, sweep.prices[k] * 100, marker="o", ms=3, label=tr.label)
        ax.set_xlabel("beta")
        ax.set_ylabel("option price (% of tranche notional)")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_term_recovery(curve_recovery: np.ndarray, term_recovery: np.ndarray, horizons: Sequence[float],
                       path: str | Path) -> Path:
    """Implied unconditional term recovery against curve recovery per name."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for h, t in enumerate(horizons):
            ax.scatter(curve_recovery * 100, term_recovery[h] * 100, s=8, label=f"{t:g}Y")
        lo = min(float(curve_recovery.min()), float(term_recovery.min())) * 100 - 2
        hi = max(float(curve_recovery.max()), float(term_recovery.max())) * 100 + 2
        ax.plot([lo, hi], [lo, hi], color="k", lw=0.8)
        ax.set_xlabel("curve recovery (%)")
        ax.set_ylabel("model term recovery (%)")
        ax.legend()
        return _save(fig, path)
