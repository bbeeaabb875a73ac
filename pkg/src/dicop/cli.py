"""Command-line front end: calibrate, chain, price, simulate, lattice-price, check.

Settings resolve as command-line flags, then a JSON config file, then the
defaults on :class:`RunConfig`. Tables go to stdout or report files with six
decimals; figures are written next to the report.

Exit status: 0 ok, 2 input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrate import CalibrationError, InfeasibleError, calibrate, calibration_report
from .copula import CopulaError, FactorMarginal, default_grid, load_marginals, save_marginals
from .lattice import BETA_SWEEP, LatticeError, OptionSpec, OuParams, beta_sweep
from .marketdata import CreditCurve, EtlTargets, MarketDataError, TrancheDef, load_curves, load_targets
from .markov import ChainError, TransitionChain, build_chain, load_chain, save_chain, validate_chain
from .model import ModelState, build_model
from .pricer import PricingError
from .recovery import RecoveryError, RecoverySpec
from .simulate import DEFAULT_SEED, SimConfig, SimulationError, beta_recovery_crosscheck, simulate_portfolio, \
    temporal_loss_correlation

log = logging.getLogger("dicop")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def packaged(name: str) -> Path:
    """Path of a file shipped in the package data directory."""
    return Path(str(resources.files("dicop") / "data" / name))


@dataclass
class RunConfig:
    command: str = ""
    curves: str | None = None
    targets: str | None = None
    recovery: str | None = None
    marginals: str | None = None
    chain: str | None = None
    out_dir: str = "."
    out: str | None = None
    report: str | None = None
    grid_size: int = 101
    alpha: float | None = None
    gamma: float | None = None
    soft_weight: float = 1e6
    calib_method: str = "linearized"
    chain_method: str = "maxent"
    paths: int = 100_000
    seed: int = DEFAULT_SEED
    workers: int | None = None
    condition: tuple[float, float] = (5.0, 0.10)
    crosscheck: bool = False
    ou: dict = field(default_factory=dict)
    betas: tuple[float, ...] = BETA_SWEEP
    option: dict = field(default_factory=lambda: {"T1": 5.0, "T2": 10.0, "strike": "etl"})
    figures: bool = True

    def validate(self) -> "RunConfig":
        if self.grid_size < 3:
            raise ConfigError("grid_size must be at least 3")
        if not self.soft_weight > 0:
            raise ConfigError("soft_weight must be positive")
        if self.paths < 1:
            raise ConfigError("paths must be positive")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ConfigError("alpha outside [0, 1]")
        if self.gamma is not None and not 0 <= self.gamma <= 1:
            raise ConfigError("gamma outside [0, 1]")
        if any(not 0 <= b < 1 for b in self.betas):
            raise ConfigError("every beta must lie in [0, 1)")
        for name in ("curves", "targets", "recovery", "marginals", "chain"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path}")
        return self


def _parse_kv(text: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {part!r}")
        out[key.strip()] = val.strip()
    return out


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and explicit flags (in rising precedence)."""
    cfg = RunConfig(command=args.command)
    names = {f.name for f in fields(RunConfig)}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("betas", "condition"):
            if key in data:
                data[key] = tuple(data[key])
        cfg = dataclasses.replace(cfg, **data)
    flags = {k: v for k, v in vars(args).items() if k in names and k != "command" and v is not None}
    if "ou" in flags:
        flags["ou"] = {**cfg.ou, **_parse_kv(flags["ou"])}
    if "option" in flags:
        flags["option"] = {**cfg.option, **_parse_kv(flags["option"])}
    if "betas" in flags:
        flags["betas"] = _parse_floats(flags["betas"])
    if "condition" in flags:
        flags["condition"] = _parse_floats(flags["condition"])
    return dataclasses.replace(cfg, **flags).validate()


def _inputs(cfg: RunConfig) -> tuple[list[CreditCurve], EtlTargets, RecoverySpec]:
    curves = load_curves(cfg.curves or packaged("portfolio.csv"))
    if cfg.gamma is not None:
        curves = [dataclasses.replace(c, gamma=(cfg.gamma,) * len(c.horizons)) for c in curves]
    targets = load_targets(cfg.targets or packaged("targets.json"))
    spec = RecoverySpec.load(cfg.recovery or packaged("recovery.json"))
    if cfg.alpha is not None:
        spec = RecoverySpec(spec.p_knots, spec.mu_knots, cfg.alpha)
    return curves, targets, spec


def _chain_marginals(chain: TransitionChain) -> list[FactorMarginal]:
    qs = chain.marginals()[1:]
    return [FactorMarginal(chain.grid, q / q.sum(), t) for q, t in zip(qs, chain.horizons[1:])]


def _model(cfg: RunConfig, curves, spec, marginals: Sequence[FactorMarginal] | None = None) -> ModelState:
    if marginals is None:
        if cfg.marginals is None:
            raise ConfigError("a marginals file is required (run calibrate first)")
        marginals = load_marginals(cfg.marginals)
    return build_model(curves, spec, marginals)


def _emit(text: str, path: str | Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
        log.info("wrote %s", path)


def _figure_path(report: str | Path | None, out_dir: str, suffix: str) -> Path:
    if report is not None:
        r = Path(report)
        return r.with_name(f"{r.stem}_{suffix}.png")
    return Path(out_dir) / f"{suffix}.png"


def cmd_calibrate(cfg: RunConfig) -> int:
    from . import plotting

    curves, targets, spec = _inputs(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = calibrate(curves, targets, spec, default_grid(cfg.grid_size), soft_weight=cfg.soft_weight,
                    method=cfg.calib_method)
    save_marginals(res.model.marginals, out / "marginals.csv")
    report = calibration_report(res)
    (out / "calibration.csv").write_text(report)
    timing = "stage,seconds\n" + "".join(f"{r.horizon:g}Y,{r.seconds:.6f}\n" for r in res.reports)
    (out / "timing.csv").write_text(timing + f"total,{res.seconds:.6f}\n")
    sys.stdout.write(report)
    if cfg.figures:
        plotting.plot_cdfs(res.model.marginals, out / "calibration_cdf.png")
        plotting.plot_calibration(res, out / "calibration_fit.png")
        rc = np.array([c.curve_recovery for c in curves])
        plotting.plot_term_recovery(rc, np.array([f.term_recovery for f in res.model.fits]),
                                    res.model.horizons, out / "term_recovery.png")
    return EXIT_OK


def cmd_chain(cfg: RunConfig) -> int:
    if cfg.marginals is None:
        raise ConfigError("chain needs --marginals")
    marginals = load_marginals(cfg.marginals)
    chain = build_chain(marginals, cfg.chain_method)
    diag = validate_chain(chain, marginals)
    out = Path(cfg.out) if cfg.out else Path(cfg.out_dir) / f"chain_{cfg.chain_method}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_chain(chain, out)
    sys.stdout.write(diag.to_csv())
    if not diag.ok():
        log.error("chain failed validation")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_price(cfg: RunConfig) -> int:
    curves, targets, spec = _inputs(cfg)
    model = _model(cfg, curves, spec)
    curve = model.etl_curve(targets.tranches)
    lines = ["attach,detach,horizon,etl,eta,target,residual"]
    for k, tr in enumerate(targets.tranches):
        for h, t in enumerate(curve.horizons):
            tgt = targets.etl[k, targets.horizons.index(t)] if t in targets.horizons else np.nan
            lines.append(f"{tr.attach:.6f},{tr.detach:.6f},{t:g},{curve.etl[k, h]:.6f},{curve.eta[k, h]:.6f},"
                         f"{tgt:.6f},{curve.etl[k, h] - tgt:.6f}")
    _emit("\n".join(lines) + "\n", cfg.report)
    return EXIT_OK


def simulation_report(sim, analytic: np.ndarray, corr: np.ndarray, n_cond: int, curve_el: np.ndarray,
                      condition: tuple[float, float], names: Sequence[str]) -> str:
    """Three delimited sections: ETL comparison, loss correlations, single-name EL."""
    lines = ["attach,detach,horizon,semi_analytic,mc,mc_se,diff"]
    for k, tr in enumerate(sim.tranches):
        for h, t in enumerate(sim.horizons):
            a, m = analytic[k, h], sim.etl[k, h]
            lines.append(f"{tr.attach:.6f},{tr.detach:.6f},{t:g},{a:.6f},{m:.6f},{sim.etl_se[k, h]:.6f},{m - a:.6f}")
    lines.append("")
    edges = (0.0, *sim.horizons)
    labels = [f"{a:g}-{b:g}" for a, b in zip(edges, edges[1:])]
    lines.append(f"# incremental loss correlation given loss({condition[0]:g}Y) < {condition[1]:.6f}; paths={n_cond}")
    lines.append("period," + ",".join(labels))
    for lab, row in zip(labels, corr):
        lines.append(lab + "," + ",".join(f"{v:.6f}" for v in row))
    lines.append("")
    lines.append("name,horizon,curve_el,mc_el,mc_se,z")
    for h, t in enumerate(sim.horizons):
        for i, name in enumerate(names):
            se = sim.name_el_se[h, i]
            z = (sim.name_el[h, i] - curve_el[h, i]) / se if se > 0 else 0.0
            lines.append(f"{name},{t:g},{curve_el[h, i]:.6f},{sim.name_el[h, i]:.6f},{se:.6f},{z:.6f}")
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg: RunConfig) -> int:
    from . import plotting

    if cfg.chain is None:
        raise ConfigError("simulate needs --chain")
    curves, targets, spec = _inputs(cfg)
    chain = load_chain(cfg.chain)
    model = _model(cfg, curves, spec, _chain_marginals(chain))
    config = SimConfig(chain, cfg.paths, cfg.seed, workers=cfg.workers)
    t0 = time.perf_counter()
    sim = simulate_portfolio(config, model, targets.tranches)
    log.info("simulated %d paths in %.1fs", cfg.paths, time.perf_counter() - t0)
    analytic = np.array([[model.tranche_etl(tr, t) for t in sim.horizons] for tr in targets.tranches])
    corr, n_cond = temporal_loss_correlation(sim, cfg.condition)
    curve_el = np.array([[c.expected_loss(t) for c in curves] for t in sim.horizons])
    text = simulation_report(sim, analytic, corr, n_cond, curve_el, cfg.condition, [c.name for c in curves])
    if cfg.crosscheck:
        cross = beta_recovery_crosscheck(config, model, targets.tranches)
        text += "\n# beta vs two-point spot recovery\n" + cross.to_csv()
    _emit(text, cfg.report)
    if cfg.figures:
        plotting.plot_mc_vs_analytic(sim, analytic, _figure_path(cfg.report, cfg.out_dir, "mc_vs_analytic"))
        plotting.plot_name_el(curve_el, sim, _figure_path(cfg.report, cfg.out_dir, "name_el"))
    return EXIT_OK


def _option(cfg: RunConfig, tranches: Sequence[TrancheDef]) -> OptionSpec:
    opt = cfg.option
    try:
        t1, t2 = float(opt.get("T1", 5.0)), float(opt.get("T2", 10.0))
    except ValueError:
        raise ConfigError(f"option horizons must be numbers: {opt}") from None
    strike = str(opt.get("strike", "etl"))
    strikes = None
    if strike != "etl":
        try:
            strikes = (float(strike),) * len(tranches)
        except ValueError:
            raise ConfigError(f"strike must be 'etl' or a number, got {strike!r}") from None
    return OptionSpec(t1, t2, tuple(tranches), strikes)


def cmd_lattice_price(cfg: RunConfig) -> int:
    from . import plotting

    if cfg.chain is None:
        raise ConfigError("lattice-price needs --chain")
    curves, targets, spec = _inputs(cfg)
    chain = load_chain(cfg.chain)
    model = _model(cfg, curves, spec, _chain_marginals(chain))
    try:
        params = OuParams(**{k: float(v) for k, v in cfg.ou.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad OU parameters {cfg.ou}: {exc}") from None
    tranches = [tr for tr in targets.tranches if not (tr.attach == 0.0 and tr.detach == 1.0)]
    t0 = time.perf_counter()
    sweep = beta_sweep(chain, params, _option(cfg, tranches), model, cfg.betas)
    log.info("lattice sweep over %d betas in %.1fs", len(cfg.betas), time.perf_counter() - t0)
    text = sweep.to_csv() + (
        f"\nmarginal_error,threshold_residual\n{sweep.marginal_error:.6e},{sweep.threshold_residual:.6e}\n"
    )
    _emit(text, cfg.report)
    if cfg.figures:
        plotting.plot_beta_sweep(sweep, _figure_path(cfg.report, cfg.out_dir, "beta_sweep"))
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    from .checks import run_checks

    curves, targets, spec = _inputs(cfg)
    if cfg.marginals is not None:
        model = _model(cfg, curves, spec)
    else:
        model = calibrate(curves, targets, spec, default_grid(cfg.grid_size), soft_weight=cfg.soft_weight,
                          method=cfg.calib_method).model
    params = OuParams(**{k: float(v) for k, v in cfg.ou.items()})
    results = run_checks(model, targets, params)
    text = "property,status,value,tolerance\n" + "\n".join(r.line() for r in results) + "\n"
    _emit(text, cfg.report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "calibrate": cmd_calibrate,
    "chain": cmd_chain,
    "price": cmd_price,
    "simulate": cmd_simulate,
    "lattice-price": cmd_lattice_price,
    "check": cmd_check,
}

INPUT_ERRORS = (ConfigError, MarketDataError, RecoveryError, CopulaError, ChainError, InfeasibleError,
                FileNotFoundError, PricingError)
NUMERIC_ERRORS = (CalibrationError, LatticeError, SimulationError, FloatingPointError, np.linalg.LinAlgError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicop", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def inputs(p):
        p.add_argument("--curves", help="credit curve file (default: packaged fixture)")
        p.add_argument("--targets", help="ETL target file (default: packaged fixture)")
        p.add_argument("--recovery", help="recovery spec file (default: packaged fixture)")
        p.add_argument("--alpha", type=float, help="override the recovery variance fraction")
        p.add_argument("--gamma", type=float, help="override the systemic hazard fraction for every name")
        p.add_argument("--no-figures", dest="figures", action="store_const", const=False)

    p = sub.add_parser("calibrate", help="fit factor marginals to ETL targets")
    inputs(p)
    p.add_argument("--out-dir")
    p.add_argument("--grid-size", type=int)
    p.add_argument("--soft-weight", type=float)
    p.add_argument("--method", dest="calib_method", choices=("linearized", "frozen"))

    p = sub.add_parser("chain", help="build a transition chain from marginals")
    p.add_argument("--marginals", required=False)
    p.add_argument("--method", dest="chain_method", choices=("comono", "maxent"))
    p.add_argument("--out")
    p.add_argument("--out-dir")

    p = sub.add_parser("price", help="semi-analytic ETL/ETA from marginals")
    inputs(p)
    p.add_argument("--marginals")
    p.add_argument("--report")

    p = sub.add_parser("simulate", help="Monte Carlo over a chain")
    inputs(p)
    p.add_argument("--chain")
    p.add_argument("--paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--condition", help="horizon,cap for the conditional correlation (default 5,0.10)")
    p.add_argument("--crosscheck", action="store_const", const=True, help="also run the beta-recovery crosscheck")
    p.add_argument("--report")
    p.add_argument("--out-dir")

    p = sub.add_parser("lattice-price", help="tranche options on the (X, y) lattice")
    inputs(p)
    p.add_argument("--chain")
    p.add_argument("--ou", help="kappa=..,ybar=..,vol=..,y0=..")
    p.add_argument("--beta", dest="betas", help="comma-separated mixing weights")
    p.add_argument("--option", help="T1=5,T2=10,strike=etl")
    p.add_argument("--report")
    p.add_argument("--out-dir")

    p = sub.add_parser("check", help="run the invariant suite")
    inputs(p)
    p.add_argument("--marginals")
    p.add_argument("--grid-size", type=int)
    p.add_argument("--report")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = resolve_config(args)
        stage = cfg.command
        return COMMANDS[cfg.command](cfg)
    except INPUT_ERRORS as exc:
        log.error("%s: input error: %s", stage, exc)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        log.error("%s: numeric failure: %s", stage, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
