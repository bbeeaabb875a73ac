import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dicop.marketdata import (CreditCurve, EtlTargets, MarketDataError, TrancheDef, adjust_curves_preserve_el,
                              check_targets_consistent, check_weights, el_preserving_prob, load_curves,
                              load_portfolio, load_targets, save_curves, save_targets)

HORIZONS = (5.0, 7.0, 10.0)


def _curve(name="A", p=(0.05, 0.07, 0.10), rec=0.4, w=1.0, gamma=(0.9, 0.9, 0.9)):
    return CreditCurve(name, HORIZONS, tuple(p), rec, w, tuple(gamma))


curve_probs = st.lists(st.floats(1e-4, 0.3), min_size=3, max_size=3).map(lambda v: tuple(np.cumsum(sorted(v))))


@given(probs=st.lists(curve_probs, min_size=1, max_size=6),
       rec=st.floats(0.0, 0.9), gamma=st.floats(0.0, 1.0))
def test_curve_file_round_trip(tmp_path_factory, probs, rec, gamma):
    n = len(probs)
    curves = [_curve(f"N{i}", p, rec, 1.0 / n, (gamma,) * 3) for i, p in enumerate(probs)]
    curves = check_weights(curves)
    path = tmp_path_factory.mktemp("rt") / "curves.csv"
    save_curves(curves, path)
    assert load_curves(path) == curves


def test_term_structure_gamma_round_trip(tmp_path):
    curves = [_curve(gamma=(0.5, 0.7, 0.9))]
    save_curves(curves, tmp_path / "c.csv")
    assert load_curves(tmp_path / "c.csv") == curves


def test_shipped_portfolio_is_normalized(fixture_inputs):
    curves, targets, _ = fixture_inputs
    assert len(curves) == 122
    assert abs(sum(c.weight for c in curves) - 1.0) < 1e-12


def test_non_monotone_probability_rejected(tmp_path):
    (tmp_path / "c.csv").write_text("A,5:0.10,7:0.08,10:0.12,0.4,1.0,0.9\n")
    with pytest.raises(MarketDataError, match="default_prob not monotone"):
        load_curves(tmp_path / "c.csv")


def test_weights_normalized_or_rejected():
    near = [_curve("A", w=0.5 + 4e-7), _curve("B", w=0.5)]
    out = check_weights(near)
    assert abs(sum(c.weight for c in out) - 1.0) < 1e-12
    with pytest.raises(MarketDataError):
        check_weights([_curve("A", w=0.5), _curve("B", w=0.49)])


def test_target_table_accepted(fixture_inputs):
    _, targets, _ = fixture_inputs
    eq = targets.tranches.index(TrancheDef(0.0, 0.026))
    assert targets.etl[eq, targets.horizons.index(5.0)] == pytest.approx(0.8351)
    assert targets.index_row() is not None


def test_target_round_trip(tmp_path, fixture_inputs):
    _, targets, _ = fixture_inputs
    save_targets(targets, tmp_path / "t.json")
    back = load_targets(tmp_path / "t.json")
    assert back.horizons == targets.horizons and back.tranches == targets.tranches
    np.testing.assert_array_equal(back.etl, targets.etl)


def test_decreasing_target_flagged(tmp_path):
    doc = {"horizons": [5, 7], "tranches": [[0, 0.03]], "etl": [[0.8, 0.7]]}
    (tmp_path / "t.json").write_text(json.dumps(doc))
    with pytest.raises(MarketDataError, match="not monotone"):
        load_targets(tmp_path / "t.json")


def test_index_row_must_match_curves(fixture_inputs):
    curves, targets, _ = fixture_inputs
    check_targets_consistent(targets, curves)
    bad = EtlTargets(targets.horizons, targets.tranches, targets.etl * 1.01)
    with pytest.raises(MarketDataError, match="inconsistent"):
        check_targets_consistent(bad, curves)


def test_load_portfolio(data_dir):
    curves, targets = load_portfolio(data_dir / "portfolio.csv", data_dir / "targets.json")
    assert len(curves) == 122 and targets.horizons == HORIZONS


@pytest.mark.parametrize("p,rc,rm,expected", [(0.10, 0.40, 0.40, 0.10), (0.10, 0.40, 0.50, 0.12)])
def test_el_preserving_examples(p, rc, rm, expected):
    assert float(el_preserving_prob(p, rc, rm)) == pytest.approx(expected, abs=1e-15)


def test_identity_adjustment():
    c = _curve()
    out = adjust_curves_preserve_el([c], np.array([[0.4, 0.4, 0.4]]))
    assert out[0].default_prob == pytest.approx(c.default_prob, abs=1e-15)


@given(p=curve_probs, rc=st.floats(0.0, 0.8), rm=st.floats(0.0, 0.5))
def test_adjustment_preserves_expected_loss(p, rc, rm):
    # flat model recovery keeps the adjusted curve monotone, so no clamp applies
    c = _curve(p=p, rec=rc)
    p_new = np.asarray(p) * (1 - rc) / (1 - rm)
    if np.any(p_new >= 1):
        with pytest.raises(MarketDataError):
            adjust_curves_preserve_el([c], np.full((1, 3), rm))
        return
    out = adjust_curves_preserve_el([c], np.full((1, 3), rm))[0]
    for t in HORIZONS:
        assert out.prob_at(t) * (1 - rm) == pytest.approx(c.expected_loss(t), abs=1e-12)


@given(p=curve_probs, t=st.lists(st.floats(0.0, 12.0), min_size=2, max_size=8))
def test_interpolation_monotone_and_exact_at_quotes(p, t):
    c = _curve(p=p)
    vals = [c.prob(x) for x in sorted(t)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert c.prob(0.0) == 0.0
    for h, q in zip(HORIZONS, p):
        assert c.prob(h) == pytest.approx(q, abs=1e-14)


def test_curve_validation():
    with pytest.raises(MarketDataError):
        _curve(p=(0.1, 0.2, 1.0))
    with pytest.raises(MarketDataError):
        _curve(gamma=(0.9, 0.7, 0.9))
    with pytest.raises(MarketDataError):
        TrancheDef(0.3, 0.1)
