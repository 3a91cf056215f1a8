import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pathhedge.path_core import DiscretePath, TimeGrid, lift, sup_norm
from pathhedge.pathwise_calculus import QvConfig
from pathhedge.prediction_sets import (
    AvgFluctuation,
    BlackScholesUncertain,
    ContractError,
    DualityGap,
    GExpectation,
    GrowthFunction,
    HolderBall,
    Intersection,
    build_qv_and_check,
    calibrate_thresholds,
    contains,
    growth_value,
    is_stop_closed,
    spec_from_json,
    spec_to_json,
    stop_closure_check,
    stop_closure_failures,
)

from conftest import brownian_path


def _lp(w, nu, T=1.0):
    grid = TimeGrid.uniform(T, len(w))
    return lift(DiscretePath(grid, np.asarray(w, float)), DiscretePath(grid, np.asarray(nu, float)))


def _names(report):
    return {v.name for v in report.violated_conditions}


# ---- membership examples


def test_gexp_constant_density_member(rng):
    t = np.linspace(0, 1, 101)
    w = np.cumsum(rng.standard_normal(101))
    rep = contains(GExpectation(0.1, 0.3), _lp(w, 0.04 * t))
    assert rep.member and rep.violated_conditions == []


def test_gexp_density_outside_band():
    t = np.linspace(0, 1, 101)
    rep = contains(GExpectation(0.1, 0.3), _lp(np.zeros(101), 0.25 * t))
    assert not rep.member
    assert "density_band_upper" in _names(rep)
    rep = contains(GExpectation(0.1, 0.3), _lp(np.zeros(101), 0.001 * t))
    assert "density_band_lower" in _names(rep)


def test_gexp_local_violation_located():
    t = np.linspace(0, 1, 101)
    nu = 0.04 * t
    nu[60:] += 0.05  # jump at t = 0.6
    rep = contains(GExpectation(0.1, 0.3), _lp(np.zeros(101), nu))
    v = [v for v in rep.violated_conditions if v.name == "density_band_upper"][0]
    assert v.t == pytest.approx(0.6)
    assert v.margin > 0.04


def test_avg_fluctuation_constant_member():
    rep = contains(AvgFluctuation(c=1.0), _lp(np.ones(33), np.zeros(33)))
    assert rep.member


def test_avg_fluctuation_needs_positive_start():
    rep = contains(AvgFluctuation(c=1.0), _lp(np.full(33, 2.0), np.zeros(33)))
    assert "initial_price" in _names(rep)


def test_bs_uncertain_gbm_round_trip(rng):
    sigma, n = 0.3, 4097
    t = np.linspace(0, 1, n)
    dw = np.sqrt(np.diff(t)) * rng.standard_normal(n - 1)
    w = np.exp(sigma * np.concatenate([[0], np.cumsum(dw)]) - 0.5 * sigma**2 * t)
    sq = w**2
    nu = np.concatenate([[0.0], np.cumsum(0.5 * sigma**2 * (sq[1:] + sq[:-1]) * np.diff(t))])
    assert contains(BlackScholesUncertain(sigma, sigma, s0=1.0), _lp(w, nu)).member
    # a different vol leaves the set
    assert not contains(BlackScholesUncertain(0.5, 0.5, s0=1.0), _lp(w, nu)).member


def test_duality_gap_set():
    assert contains(DualityGap(), _lp(np.zeros(9), np.zeros(9))).member
    rep = contains(DualityGap(), _lp(np.linspace(0, 1.5, 9), np.zeros(9)))
    assert "range_upper" in _names(rep)
    rep = contains(DualityGap(), _lp(np.linspace(0.2, 0.5, 9), np.zeros(9)))
    assert "initial_price" in _names(rep)


def test_holder_ball():
    w = 0.5 + np.linspace(0, 1, 33)
    # |w(0)| + Lipschitz constant = 1.5
    assert contains(HolderBall(1.0, 1.5), _lp(w, np.zeros(33))).member
    assert not contains(HolderBall(1.0, 1.4), _lp(w, np.zeros(33))).member


def test_intersection_collects_all_parts():
    t = np.linspace(0, 1, 33)
    spec = Intersection((GExpectation(0.0, 0.1), DualityGap()))
    rep = contains(spec, _lp(2 * t, 0.5 * t))
    assert {"density_band_upper", "range_upper"} <= _names(rep)


def test_a2_enforced():
    nu = np.array([0.0, 0.2, 0.1, 0.3, 0.4])
    rep = contains(GExpectation(0.0, 10.0), _lp(np.zeros(5), nu))
    assert "qv_nondecreasing" in _names(rep)
    rep = contains(GExpectation(0.0, 10.0), _lp(np.zeros(5), nu.clip(0.2, None)))
    assert "qv_starts_at_zero" in _names(rep)


def test_bad_parameters():
    with pytest.raises(ValueError):
        GExpectation(0.3, 0.1)
    with pytest.raises(ValueError):
        AvgFluctuation(0.0)
    with pytest.raises(ValueError):
        contains(DualityGap(), _lp(np.zeros(3), np.zeros(3)), tol=0.0)


@given(
    st.floats(0.0, 0.3), st.floats(0.0, 0.3), st.floats(1e-8, 1e-2), st.floats(1.0, 100.0),
    st.lists(st.floats(0.0, 0.2), min_size=4, max_size=20),
)
def test_membership_monotone_in_tol(lo, hi, tol, factor, dens):
    lo, hi = min(lo, hi), max(lo, hi)
    dens = np.asarray(dens)
    n = len(dens) + 1
    nu = np.concatenate([[0.0], np.cumsum(dens / (n - 1))])
    lp = _lp(np.zeros(n), nu)
    spec = GExpectation(lo, hi)
    if contains(spec, lp, tol).member:
        assert contains(spec, lp, tol * factor).member


@given(st.lists(st.floats(-1.0, 2.0), min_size=2, max_size=20))
def test_duality_gap_members_have_unit_range(w):
    w = np.asarray(w)
    rep = contains(DualityGap(), _lp(w, np.zeros(len(w))), tol=1e-9)
    if rep.member:
        assert abs(w[0]) <= 1e-9 and w.min() >= -1e-9 and w.max() <= 1 + 1e-9


def test_report_json():
    rep = contains(DualityGap(), _lp(np.linspace(0, 2, 5), np.zeros(5)))
    d = json.loads(json.dumps(rep.to_json()))
    assert d["member"] is False
    assert d["violated_conditions"][0]["name"] == "range_upper"
    assert d["violated_conditions"][0]["margin"] == pytest.approx(1.0 - 1e-6)


@pytest.mark.parametrize(
    "spec",
    [
        GExpectation(0.1, 0.3),
        GExpectation(0.0, "tanh_price", holder_alpha=0.3, holder_bound=5.0, s0=0.0),
        BlackScholesUncertain(0.1, 0.2, s0=2.0),
        AvgFluctuation(1.5),
        DualityGap(),
        HolderBall(0.4, 3.0),
        Intersection((GExpectation(0.0, 0.3), DualityGap())),
    ],
)
def test_spec_json_round_trip(spec):
    d = json.loads(json.dumps(spec_to_json(spec)))
    assert spec_from_json(d) == spec


def test_spec_json_rejects_unknown():
    with pytest.raises(ValueError):
        spec_from_json({"variant": "Nope"})
    with pytest.raises(ValueError):
        spec_from_json({"variant": "GExpectation", "sigma_lo": 0.0, "sigma_hi": "not_registered"})


def test_registered_vol_function_membership():
    # tanh_price on a zero path gives sigma = 0.2
    t = np.linspace(0, 1, 33)
    assert contains(GExpectation(0.0, "tanh_price"), _lp(np.zeros(33), 0.04 * t)).member
    assert not contains(GExpectation(0.0, "tanh_price"), _lp(np.zeros(33), 0.05 * t)).member


# ---- stopping closure


def test_stop_closure_zero_lower_vol():
    t = np.linspace(0, 1, 33)
    lp = _lp(np.sin(3 * t), 0.04 * t)
    spec = GExpectation(0.0, 0.3)
    assert is_stop_closed(spec)
    assert stop_closure_check(spec, lp)


def test_stop_closure_positive_lower_vol_fails():
    t = np.linspace(0, 1, 33)
    lp = _lp(np.sin(3 * t), 0.04 * t)
    spec = GExpectation(0.1, 0.3)
    assert not is_stop_closed(spec)
    assert contains(spec, lp).member
    assert not stop_closure_check(spec, lp)
    failures = stop_closure_failures(spec, lp)
    # stopping at T keeps the path; stopping early enough drops nu below the band
    assert 1.0 not in failures
    assert 0.0 in failures


def test_stop_closure_avg_fluctuation_constant():
    assert stop_closure_check(AvgFluctuation(2.0), _lp(np.ones(17), np.zeros(17)))


def test_stop_closure_contract():
    with pytest.raises(ContractError):
        stop_closure_check(DualityGap(), _lp(np.full(5, 3.0), np.zeros(5)))


# ---- growth function


def _ramp_lp(slope, n=65):
    t = np.linspace(0, 1, n)
    return _lp(slope * t, np.zeros(n))


def test_growth_example_value():
    # Hoelder-1/4 seminorm of 2.5 t on [0, 1] is 2.5, nu = 0
    lp = _ramp_lp(2.5)
    g = GrowthFunction(tuple(range(1, 51)), HolderBall(1.0, 100.0), alpha=0.25)
    assert g.holder_sum(lp) == pytest.approx(2.5)
    v = growth_value(g, lp)
    assert v.level == 4
    assert v.value == pytest.approx(4 + 2.5 + 0.0)


def test_growth_level_above_minimum():
    lp = _ramp_lp(9.5)
    g = GrowthFunction(tuple(range(1, 51)), HolderBall(1.0, 100.0), alpha=0.25)
    # least n >= 4 with n + 1 >= 9.5
    assert growth_value(g, lp).level == 9


def test_growth_outside_set():
    g = GrowthFunction(tuple(range(1, 51)), DualityGap(), alpha=0.25)
    v = growth_value(g, _ramp_lp(2.5))
    assert v.value == np.inf and "outside" in v.diagnostic


def test_growth_tabulation_exhausted():
    g = GrowthFunction((1.0, 2.0, 3.0, 4.0, 5.0), HolderBall(1.0, 100.0), alpha=0.25)
    v = growth_value(g, _ramp_lp(20.0))
    assert v.value == np.inf and v.diagnostic == "tabulation exhausted"


def test_growth_rejects_bad_tables():
    with pytest.raises(ValueError):
        GrowthFunction((2.0, 1.0), DualityGap())
    with pytest.raises(ValueError):
        GrowthFunction((1.0, 2.0), DualityGap(), alpha=0.5)


@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=30), st.floats(0.05, 0.25))
def test_growth_sublevel_bounds_sup_norms(w, alpha):
    w = np.asarray(w)
    n = len(w)
    nu = np.linspace(0, 0.1, n)
    lp = _lp(w, nu)
    g = GrowthFunction.linear(HolderBall(1.0, 1e6), scale=1.0, n_max=400, alpha=alpha)
    v = growth_value(g, lp)
    if np.isfinite(v.value):
        assert sup_norm(lp.price) + sup_norm(lp.qv) <= v.value


def test_calibrated_thresholds_exceed_median():
    lps = [_ramp_lp(s) for s in (1.0, 2.0, 3.0)]
    a = calibrate_thresholds(lps, alpha=0.25, n_max=10)
    assert a[0] > 2.0 and a[1] == pytest.approx(2 * a[0])


# ---- lifting plus checking


def test_linear_path_member_of_zero_lower_band():
    grid = TimeGrid.uniform(1.0, 2**12 + 1)
    path = DiscretePath(grid, grid.points.copy())
    lp, rep = build_qv_and_check(GExpectation(0.0, 0.3), path, QvConfig(1, 10, 2e-3))
    assert rep.member
    assert np.max(lp.qv.values) < 2e-3


def test_brownian_in_band():
    path = brownian_path(3, sigma=0.2)
    cfg = QvConfig(1, 7, 2e-2)
    lp, rep = build_qv_and_check(GExpectation(0.1, 0.3), path, cfg)
    # realized variance oracle
    assert np.sum(np.diff(path.values) ** 2) == pytest.approx(0.04, rel=0.05)
    assert rep.member, rep.to_json()


def test_brownian_too_volatile():
    path = brownian_path(3, sigma=0.5)
    # the level-7 gap scales with the qv itself, so the Omega test gets a wider tol
    lp, rep = build_qv_and_check(GExpectation(0.1, 0.3), path, QvConfig(1, 7, 5e-2))
    assert not rep.member
    assert _names(rep) == {"density_band_upper"}
    v = [v for v in rep.violated_conditions if v.name == "density_band_upper"][0]
    assert 0.0 < v.t <= 1.0
    assert v.margin > 0.05  # excess of about (0.25 - 0.09) over the horizon


def test_off_omega_reported():
    grid = TimeGrid.uniform(1.0, 2**10 + 1)
    path = DiscretePath(grid, np.sin(40 * grid.points))
    _, rep = build_qv_and_check(GExpectation(0.0, 10.0), path, QvConfig(1, 12, 1e-9))
    assert not rep.member
    assert rep.violated_conditions[0].name == "omega"
