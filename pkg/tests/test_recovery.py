import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dicop.copula import default_grid, uniform_marginal
from dicop.recovery import (RecoveryError, RecoverySpec, calibrate_name_scale, segment_moments, spot_moments,
                            term_moments, two_point_draw, two_point_levels, unconditional_term_recovery)
from oracles import quadrature_segment_moments, quadrature_term_moments


@st.composite
def specs(draw):
    k = draw(st.integers(0, 5))
    inner = sorted(set(draw(st.lists(st.floats(0.01, 0.99), min_size=k, max_size=k))))
    p = np.array([0.0, *inner, 1.0])
    mu = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=p.size, max_size=p.size)))
    return RecoverySpec(p, mu, draw(st.floats(0.0, 1.0)))


def test_spot_moment_examples():
    spec = RecoverySpec(np.array([0.0, 1.0]), np.array([0.4, 0.4]), 0.25)
    mu, var = spot_moments(spec, 0.3)
    assert mu == pytest.approx(0.4) and var == pytest.approx(0.06)
    _, var0 = spot_moments(RecoverySpec(spec.p_knots, spec.mu_knots, 0.0), 0.3)
    assert var0 == 0.0
    _, var1 = spot_moments(RecoverySpec(spec.p_knots, np.array([0.5, 0.5]), 1.0), 0.3)
    assert var1 == pytest.approx(0.25)


def test_term_constant_and_linear():
    const = RecoverySpec(np.array([0.0, 1.0]), np.array([0.35, 0.35]), 0.0)
    tm = term_moments(const, 0.2)
    assert tm.mu_0t == pytest.approx(0.35) and tm.var_0t == pytest.approx(0.0, abs=1e-15)
    lin = RecoverySpec(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.0)
    p = 0.37
    tm = term_moments(lin, p)
    assert tm.mu_0t == pytest.approx(1 - p / 2, abs=1e-14)
    assert tm.var_0t == pytest.approx(p * p / 12, abs=1e-14)


@pytest.mark.parametrize("p_t", [0.01, 0.07, 0.15, 0.2, 0.45, 0.9, 1.0])
def test_term_moments_match_quadrature(p_t):
    spec = RecoverySpec.default()
    tm = term_moments(spec, p_t, 1.1)
    m, v = quadrature_term_moments(spec.p_knots, spec.mu_knots, spec.alpha, p_t, 1.1)
    assert abs(tm.mu_0t - m) < 1e-8 and abs(tm.var_0t - v) < 1e-8


def test_default_table_has_local_peak():
    spec = RecoverySpec.default()
    peak = spec.mu(0.15)
    assert peak > spec.mu(0.1) and peak > spec.mu(0.2)
    assert spec.mu(0.0) > spec.mu(1.0)


@given(spec=specs(), p_t=st.floats(1e-6, 1.0), scale=st.floats(0.0, 1.0))
def test_term_variance_bound(spec, p_t, scale):
    tm = term_moments(spec, p_t, scale)
    assert 0.0 <= tm.mu_0t <= 1.0
    assert -1e-15 <= tm.var_0t <= tm.mu_0t * (1 - tm.mu_0t) + 1e-15


@given(spec=specs(), p=st.floats(0.0, 1.0))
def test_spot_bounds(spec, p):
    mu, var = spot_moments(spec, p, spec.max_scale if np.isfinite(spec.max_scale) else 1.0)
    assert -1e-15 <= mu <= 1 + 1e-15
    assert 0.0 <= var <= mu * (1 - mu) + 1e-15


@given(spec=specs(), a=st.floats(1e-4, 1.0), b=st.floats(1e-4, 1.0), scale=st.floats(0.2, 1.0))
def test_chain_rule_identities(spec, a, b, scale):
    p1, p2 = sorted((a, b))
    if p2 - p1 < 1e-3:
        return
    t1, t2 = term_moments(spec, p1, scale), term_moments(spec, p2, scale)
    seg = segment_moments(spec, p1, p2, scale)
    assert p2 * t2.mu_0t == pytest.approx(p1 * t1.mu_0t + (p2 - p1) * seg.mu_0t, abs=1e-10)
    second = lambda tm: tm.var_0t + tm.mu_0t ** 2  # noqa: E731
    assert p2 * second(t2) == pytest.approx(p1 * second(t1) + (p2 - p1) * second(seg), abs=1e-10)


def test_segment_matches_quadrature():
    spec = RecoverySpec.default()
    seg = segment_moments(spec, 0.08, 0.33)
    m, v = quadrature_segment_moments(spec.p_knots, spec.mu_knots, spec.alpha, 0.08, 0.33)
    assert abs(seg.mu_0t - m) < 1e-8 and abs(seg.var_0t - v) < 1e-8


def test_unconditional_term_recovery_trivial_cases():
    spec = RecoverySpec.default()
    atom = np.array([1.0])
    R = unconditional_term_recovery(spec, atom, np.array([[0.2, 0.05]]))
    np.testing.assert_allclose(R, term_moments(spec, np.array([0.2, 0.05])).mu_0t, atol=1e-15)
    const = RecoverySpec(np.array([0.0, 1.0]), np.array([0.3, 0.3]))
    m = uniform_marginal(default_grid(11))
    P = np.linspace(0.0, 0.9, 11)[:, None]
    assert unconditional_term_recovery(const, m.probs, P)[0] == pytest.approx(0.3, abs=1e-14)


def test_name_scale_hits_curve_recovery():
    spec = RecoverySpec.default()
    m = uniform_marginal(default_grid(21))
    P = np.column_stack([np.linspace(0.01, 0.5, 21), np.linspace(0.0, 0.2, 21)])
    scale, clipped = calibrate_name_scale(spec, m.probs, P, np.array([0.4, 0.35]))
    assert not clipped.any()
    np.testing.assert_allclose(unconditional_term_recovery(spec, m.probs, P, scale), [0.4, 0.35], atol=1e-12)


def test_two_point_extremes():
    lo, hi = two_point_levels(0.3, 0.3 * 0.7)
    assert (lo, hi) == pytest.approx((0.0, 1.0), abs=1e-15)
    u = np.linspace(0, 1, 11, endpoint=False)
    np.testing.assert_array_equal(two_point_draw(0.3, 0.0, u), np.full(11, 0.3))


def test_two_point_points_and_moments(rng):
    lo, hi = two_point_levels(0.4, 0.06)
    assert lo == pytest.approx(0.4 - np.sqrt(0.06 * 0.4 / 0.6))
    assert hi == pytest.approx(0.4 + np.sqrt(0.06 * 0.6 / 0.4))
    draws = two_point_draw(0.4, 0.06, rng.random(1_000_000))
    se_mean = np.sqrt(0.06 / draws.size)
    assert abs(draws.mean() - 0.4) < 3 * se_mean
    se_var = np.sqrt((np.mean((draws - 0.4) ** 4) - 0.06 ** 2) / draws.size)
    assert abs(draws.var() - 0.06) < 3 * se_var


@given(mu=st.floats(0.0, 1.0), frac=st.floats(0.0, 1.0))
def test_two_point_exact_moments(mu, frac):
    var = frac * mu * (1 - mu)
    lo, hi = two_point_levels(mu, var)
    assert 0.0 <= lo <= hi <= 1.0
    mean = mu * hi + (1 - mu) * lo
    second = mu * hi ** 2 + (1 - mu) * lo ** 2
    assert mean == pytest.approx(mu, abs=1e-12)
    assert second - mean ** 2 == pytest.approx(var, abs=1e-12)


def test_spec_validation(tmp_path):
    with pytest.raises(RecoveryError):
        RecoverySpec(np.array([0.1, 1.0]), np.array([0.4, 0.4]))
    with pytest.raises(RecoveryError):
        RecoverySpec(np.array([0.0, 1.0]), np.array([0.4, 1.2]))
    spec = RecoverySpec.default()
    spec.save(tmp_path / "r.json")
    back = RecoverySpec.load(tmp_path / "r.json")
    np.testing.assert_array_equal(back.mu_knots, spec.mu_knots)
    assert back.alpha == spec.alpha
