import dataclasses

import numpy as np
import pytest
from scipy.stats import chisquare

from dicop.copula import FactorMarginal
from dicop.markov import build_chain
from dicop.model import build_model
from dicop.simulate import (SimConfig, SimResult, SimulationError, beta_recovery_crosscheck, draw_paths,
                            simulate_paths, simulate_portfolio, temporal_loss_correlation)

N_PATHS = 100_000


@pytest.fixture(scope="module")
def sim(model, chains, fixture_inputs):
    _, targets, _ = fixture_inputs
    return simulate_portfolio(SimConfig(chains["maxent"], N_PATHS, seed=7), model, targets.tranches)


def test_point_mass_family_gives_constant_path():
    grid = np.linspace(0.0, 1.0, 5)
    q = np.eye(5)[0]
    chain = build_chain([FactorMarginal(grid, q, t) for t in (1.0, 2.0, 3.0)], "comono")
    assert np.all(draw_paths(chain, 1000) == 0)


def test_states_follow_marginals(chains, model):
    for chain in chains.values():
        states = draw_paths(chain, N_PATHS, seed=3)
        assert np.all(np.diff(states, axis=1) >= 0)
        for k, m in enumerate(model.marginals, start=1):
            obs = np.bincount(states[:, k], minlength=m.probs.size).astype(float)
            exp = m.probs * N_PATHS
            # pool sparse cells so every bin expects at least five paths
            big = exp >= 5
            o = np.append(obs[big], obs[~big].sum())
            e = np.append(exp[big], exp[~big].sum())
            o, e = (o, e) if e[-1] >= 5 else (o[:-1] + np.eye(o.size - 1)[-1] * o[-1], e[:-1] + np.eye(e.size - 1)[-1] * e[-1])
            assert chisquare(o, e).pvalue > 1e-3


def test_comonotonic_paths_keep_their_rank(chains, model):
    states = draw_paths(chains["comono"], 20_000, seed=5)
    F5, F10 = model.marginals[0].cdf, model.marginals[-1].cdf
    # a path below the 5Y median stays at or below the 10Y median node range
    lo5 = states[:, 1] <= np.searchsorted(F5, 0.25)
    hi10 = states[:, 3] > np.searchsorted(F10, 0.5)
    assert not np.any(lo5 & hi10)


def test_name_el_matches_curves(sim, model):
    z = (sim.name_el - model.curve_el()) / np.maximum(sim.name_el_se, 1e-12)
    # Bonferroni over names and horizons at a 1e-3 family level
    assert np.max(np.abs(z)) < 4.9


def test_index_etl_matches_expected_loss(sim, model, fixture_inputs):
    _, targets, _ = fixture_inputs
    k = targets.index_row()
    analytic = model.etl_curve(targets.tranches).etl[k]
    assert np.all(np.abs(sim.etl[k] - analytic) < 4 * sim.etl_se[k])


def test_same_seed_reproduces(model, chains, fixture_inputs):
    _, targets, _ = fixture_inputs
    base = SimConfig(chains["maxent"], 6000, seed=11, chunk=1000)
    a = simulate_portfolio(base, model, targets.tranches)
    b = simulate_portfolio(dataclasses.replace(base, workers=2), model, targets.tranches)
    c = simulate_portfolio(dataclasses.replace(base, chunk=2500), model, targets.tranches)
    for other in (b, c):
        np.testing.assert_array_equal(a.loss_paths, other.loss_paths)
        # only the order of chunk sums differs
        np.testing.assert_allclose(a.etl, other.etl, rtol=0, atol=1e-15)
    d = simulate_portfolio(dataclasses.replace(base, seed=12), model, targets.tranches)
    assert not np.array_equal(a.etl, d.etl)


def test_standard_error_scales(model, chains, fixture_inputs):
    _, targets, _ = fixture_inputs
    small = simulate_portfolio(SimConfig(chains["maxent"], 5_000, seed=1), model, targets.tranches)
    large = simulate_portfolio(SimConfig(chains["maxent"], 20_000, seed=1), model, targets.tranches)
    ratio = large.etl_se / small.etl_se
    assert np.all(np.abs(ratio - 0.5) < 0.1)


def test_path_detail_consistent(model, chains):
    res = simulate_paths(SimConfig(chains["maxent"], 1), model, start=100, count=500)
    assert np.all(np.diff(res.loss, axis=1) >= 0)
    assert np.all(np.diff(res.recovered, axis=1) >= 0)
    defaulted = np.stack([(res.default_period <= k) @ model.weights for k in range(res.loss.shape[1])], axis=1)
    assert np.all(res.loss + res.recovered <= defaulted + 1e-12)
    rec = res.recovery[~np.isnan(res.recovery)]
    assert np.all((rec >= 0) & (rec <= 1))


def test_independent_increments_uncorrelated(rng):
    n = 40_000
    inc = rng.exponential(0.01, size=(n, 3))
    fake = SimResult((5.0, 7.0, 10.0), (), n, *[np.zeros((0, 3))] * 4, np.zeros((3, 1)), np.zeros((3, 1)),
                     loss_paths=np.cumsum(inc, axis=1))
    corr, kept = temporal_loss_correlation(fake, condition=(5.0, 0.02))
    assert kept == int(np.sum(inc[:, 0] < 0.02))
    off = corr[np.triu_indices(3, 1)]
    assert np.all(np.abs(off) < 4 / np.sqrt(kept))


def test_correlation_needs_paths(sim):
    with pytest.raises(SimulationError):
        temporal_loss_correlation(dataclasses.replace(sim, loss_paths=None))
    with pytest.raises(SimulationError):
        temporal_loss_correlation(sim, condition=(6.0, 0.1))


def test_crosscheck_zero_variance_is_exact(model, chains, fixture_inputs):
    curves, targets, spec = fixture_inputs
    flat = build_model(curves, dataclasses.replace(spec, alpha=0.0), model.marginals)
    res = beta_recovery_crosscheck(SimConfig(chains["maxent"], 4000, seed=2), flat, targets.tranches)
    assert np.max(np.abs(res.diff)) == 0.0


def test_crosscheck_negative_control(model, chains, fixture_inputs):
    _, targets, _ = fixture_inputs
    cfg = SimConfig(chains["maxent"], 20_000, seed=9)
    same = beta_recovery_crosscheck(cfg, model, targets.tranches)
    # the two spot laws share two moments, so tranche ETLs move only slightly
    assert np.max(np.abs(same.diff)) < 0.005
    shifted = beta_recovery_crosscheck(cfg, model, targets.tranches, var_mult=0.0)
    z = shifted.diff / np.maximum(shifted.diff_se, 1e-12)
    assert np.max(np.abs(z)) > 5


def test_chain_must_match_model(model, chains):
    q = model.marginals[0].probs.copy()
    q[0], q[-1] = q[0] + 0.01, q[-1] - 0.01
    other = [FactorMarginal(model.grid, q, 5.0), *model.marginals[1:]]
    with pytest.raises(SimulationError, match="differs"):
        simulate_portfolio(SimConfig(build_chain(other, "comono"), 10), model, ())


def test_bad_config():
    with pytest.raises(SimulationError):
        SimConfig(None, paths=0)
