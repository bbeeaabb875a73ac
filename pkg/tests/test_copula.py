import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dicop.copula import (CopulaError, FactorMarginal, HazardSplitError, calibrate_beta, check_dominance,
                          conditional_default_prob, default_grid, gaussian_reference, load_marginals,
                          save_marginals, uniform_marginal)
from oracles import brute_beta, normal_cdf

GRID = default_grid(31, 1e-2, 50.0)


@st.composite
def marginals(draw, grid=GRID):
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=grid.size, max_size=grid.size)))
    w[0] = min(w[0], 0.1)  # keep P(X = 0) small so the hazard split stays feasible
    w = w + 1e-3
    return FactorMarginal(grid, w / w.sum(), 5.0)


def test_trivial_splits():
    m = uniform_marginal(GRID, 5.0)
    cond, _ = calibrate_beta(np.array([0.2, 0.0]), np.array([0.0, 0.9]), m)
    assert cond.beta[0] == 0.0 and cond.c[0] == pytest.approx(0.8)
    assert cond.beta[1] == 0.0 and cond.c[1] == pytest.approx(1.0)


def test_degenerate_marginal_closed_form():
    m = FactorMarginal(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 5.0)
    p, g = 0.12, 0.9
    cond, _ = calibrate_beta(np.array([p]), np.array([g]), m)
    assert cond.beta[0] == pytest.approx(-g * math.log(1 - p), rel=1e-12)


@given(m=marginals(), p=st.floats(1e-4, 0.6), g=st.floats(0.05, 1.0))
def test_beta_matches_bisection_oracle(m, p, g):
    if m.probs[0] >= (1 - p) ** g:
        return
    cond, _ = calibrate_beta(np.array([p]), np.array([g]), m)
    assert cond.beta[0] == pytest.approx(brute_beta(p, g, m.grid, m.probs), rel=1e-9, abs=1e-12)


@given(m=marginals(), ps=st.lists(st.floats(1e-5, 0.7), min_size=1, max_size=8), g=st.floats(0.0, 1.0))
def test_single_name_consistency_and_monotone_in_x(m, ps, g):
    p = np.array(ps)
    if np.any(m.probs[0] >= (1 - p) ** g - 1e-12) and g > 0:
        return
    cond, _ = calibrate_beta(p, g, m)
    P = conditional_default_prob(cond, m.grid)
    np.testing.assert_allclose(m.probs @ P, p, atol=1e-10)
    assert np.all(np.diff(P, axis=0) >= -1e-15)
    assert np.all((P >= 0) & (P <= 1))


def test_objective_strictly_decreasing():
    m = uniform_marginal(GRID)
    lap = m.laplace(np.linspace(0, 5, 50))
    assert np.all(np.diff(lap) < 0)


def test_conditional_prob_examples():
    p, g = 0.1, 0.9
    m = uniform_marginal(GRID, 5.0)
    cond, _ = calibrate_beta(np.array([p]), np.array([g]), m)
    assert conditional_default_prob(cond, 0.0)[0] == pytest.approx(1 - (1 - p) ** (1 - g), rel=1e-12)
    flat, _ = calibrate_beta(np.array([p]), np.array([0.0]), m)
    np.testing.assert_allclose(conditional_default_prob(flat, GRID), p)
    assert conditional_default_prob(cond, 1e6)[0] == 1.0


def test_beta_floor_clamps_and_keeps_consistency():
    m5 = uniform_marginal(GRID, 5.0)
    cond5, _ = calibrate_beta(np.array([0.1]), np.array([0.9]), m5)
    # a later marginal with more weight on high x would lower beta
    w = np.linspace(0.2, 1.0, GRID.size)
    m7 = FactorMarginal(GRID, w / w.sum(), 7.0)
    free, _ = calibrate_beta(np.array([0.15]), np.array([0.9]), m7)
    assert free.beta[0] < cond5.beta[0]
    cond7, diag = calibrate_beta(np.array([0.15]), np.array([0.9]), m7, cond5.beta)
    assert diag.clamped[0] and not diag.violated[0]
    assert cond7.beta[0] == cond5.beta[0] and cond7.c[0] <= cond5.c[0]
    P = conditional_default_prob(cond7, GRID)
    assert m7.probs @ P[:, 0] == pytest.approx(0.15, abs=1e-12)


def test_unreachable_clamp_falls_back_to_all_systemic():
    m5 = uniform_marginal(GRID, 5.0)
    cond5, _ = calibrate_beta(np.array([0.1]), np.array([0.9]), m5)
    w = np.linspace(0.2, 1.0, GRID.size)
    m7 = FactorMarginal(GRID, w / w.sum(), 7.0)
    cond7, diag = calibrate_beta(np.array([0.101]), np.array([0.9]), m7, cond5.beta)
    assert diag.violated[0] and cond7.c[0] == pytest.approx(1.0)
    assert m7.probs @ conditional_default_prob(cond7, GRID)[:, 0] == pytest.approx(0.101, abs=1e-12)


def test_infeasible_split_reported():
    q = np.zeros(GRID.size)
    q[0], q[-1] = 0.95, 0.05
    with pytest.raises(HazardSplitError):
        calibrate_beta(np.array([0.3]), np.array([0.9]), FactorMarginal(GRID, q, 5.0))


def test_gaussian_reference_examples():
    assert gaussian_reference(0.1, 0.0, np.array([-2.0, 0.0, 3.0])) == pytest.approx([0.1] * 3)
    inv = NormalDist().inv_cdf
    assert gaussian_reference(0.1, 0.3, 0.0) == pytest.approx(normal_cdf(inv(0.1) / math.sqrt(0.7)), abs=1e-12)
    expected = normal_cdf((inv(0.1) + math.sqrt(0.3)) / math.sqrt(0.7))
    assert abs(gaussian_reference(0.1, 0.3, -1.0) - expected) < 1e-12
    with pytest.raises(CopulaError):
        gaussian_reference(0.1, 1.0, 0.0)


def test_marginal_validation_and_io(tmp_path):
    with pytest.raises(CopulaError):
        FactorMarginal(GRID, np.full(GRID.size, 0.5))
    ms = [uniform_marginal(GRID, 5.0), FactorMarginal(GRID, np.r_[np.zeros(5), np.full(26, 1 / 26)], 7.0)]
    save_marginals(ms, tmp_path / "m.csv")
    back = load_marginals(tmp_path / "m.csv")
    for a, b in zip(ms, back):
        np.testing.assert_array_equal(a.grid, b.grid)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert a.horizon == b.horizon
    assert check_dominance(ms) < 1e-15


def test_grid_shape():
    g = default_grid()
    assert g.size == 101 and g[0] == 0.0 and np.all(np.diff(g) > 0)
