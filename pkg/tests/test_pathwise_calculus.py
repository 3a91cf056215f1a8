import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathhedge.path_core import DiscretePath, LiftedPath, TimeGrid, stop_at
from pathhedge.pathwise_calculus import (
    Holding,
    LevelWarning,
    Leg,
    NotInOmegaError,
    QvConfig,
    SimpleStrategy,
    StoppingRule,
    generalized_integral,
    integral_S,
    integral_SS,
    iterated_integral,
    karandikar_times,
    lift_path,
    partition_square_sum,
    pathwise_qv,
    pathwise_qv_quiet,
    realized_variance,
    transfer_strategy_down,
    transfer_strategy_up,
)

from conftest import brownian_path, linear_path


def oracle_partition(x, m):
    """Plain loop: indices where the path has moved 2^-m since the last one."""
    h = 2.0**-m
    idx = [0]
    for i in range(1, len(x)):
        if abs(x[i] - x[idx[-1]]) >= h * (1 - 1e-12):
            idx.append(i)
    return idx


def oracle_ss(x, idx):
    """S^m_t at every grid index by the defining sum."""
    out = []
    for i in range(len(x)):
        tot = 0.0
        for a, b in zip(idx, idx[1:] + [len(x) - 1]):
            tot += x[a] * (x[min(b, i)] - x[min(a, i)])
        out.append(tot)
    return np.array(out)


def random_walk(seed, n=200, scale=0.05):
    rng = np.random.default_rng(seed)
    g = TimeGrid.uniform(1.0, n)
    return DiscretePath(g, np.concatenate([[rng.normal()], rng.normal(0, scale, n - 1)]).cumsum())


# --- partitions and iterated integrals -------------------------------------


def test_karandikar_examples():
    p = linear_path(9)
    assert karandikar_times(p, 1).times.tolist() == [0.0, 0.5, 1.0]
    assert karandikar_times(p, 2).times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    const = p.with_values(np.full(9, 0.7))
    assert karandikar_times(const, 3).times.tolist() == [0.0]
    assert karandikar_times(p, 2).threshold == 0.25


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("m", [1, 3, 5])
def test_karandikar_matches_loop_oracle(seed, m):
    p = random_walk(seed)
    assert karandikar_times(p, m).indices.tolist() == oracle_partition(p.values, m)


def test_iterated_integral_examples():
    p = linear_path(9)
    assert iterated_integral(p, 1).curve.values[-1] == pytest.approx(0.25, abs=1e-15)
    assert iterated_integral(p, 2).curve.values[-1] == pytest.approx(0.375, abs=1e-15)
    assert iterated_integral(p, 1).curve.values[0] == 0.0
    const = p.with_values(np.full(9, 3.0))
    assert np.all(iterated_integral(const, 4).curve.values == 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_iterated_integral_matches_direct_sum(seed):
    p = random_walk(seed, n=120)
    for m in (1, 2, 4):
        part = karandikar_times(p, m)
        ref = oracle_ss(p.values, part.indices.tolist())
        assert np.max(np.abs(iterated_integral(p, m).curve.values - ref)) <= 1e-12


@given(st.integers(0, 10**6), st.integers(1, 6))
def test_integration_by_parts_identity(seed, m):
    p = random_walk(seed, n=150, scale=0.1)
    x = p.values
    c = iterated_integral(p, m)
    qv_m = x**2 - x[0] ** 2 - 2 * c.curve.values
    direct = partition_square_sum(p, c.partition)
    assert np.max(np.abs(qv_m - direct)) <= 1e-12 * max(1.0, np.max(np.abs(x)) ** 2)


# --- quadratic variation ---------------------------------------------------


def test_qv_constant_and_linear():
    const = linear_path(65).with_values(np.full(65, 2.0))
    r = pathwise_qv(const, 1, 4, 1e-3)
    assert r.in_omega and np.all(r.qv.values == 0.0)
    # w(t) = t: level-m partition gives qv^m(T) = 2^-m, so tol must exceed 2^-m_max
    lin = linear_path(2**12 + 1)
    r = pathwise_qv(lin, 1, 10, 2e-3)
    assert r.in_omega
    assert np.max(np.abs(r.qv.values)) <= 2e-3
    assert r.qv.values[0] == 0.0


def test_qv_bound_for_finite_variation_paths():
    # for a monotone stretch each crossing contributes 2^-m * |increment|
    for f, tv in ((lambda t: t, 1.0), (lambda t: t**2, 1.0), (lambda t: np.sin(2 * np.pi * t), 4.0)):
        g = TimeGrid.uniform(1.0, 2**14 + 1)
        p = DiscretePath(g, f(g.points))
        for m in (4, 6, 8):
            qv_m = partition_square_sum(p, karandikar_times(p, m))
            # each partition increment is below 2^-m plus one grid step
            step = np.max(np.abs(np.diff(p.values)))
            assert np.max(np.abs(qv_m)) <= tv * (2.0**-m + step) * (1 + 1e-9)


def test_qv_brownian_realized_variance():
    errs = []
    for seed in range(8):
        p = brownian_path(seed)
        r = pathwise_qv_quiet(p, QvConfig(1, 7, 1e-2))
        rv = realized_variance(p)
        errs.append(abs(r.qv.values[-1] - rv) / rv)
    assert np.median(errs) <= 0.05


def test_level_warning_on_coarse_grid():
    g = TimeGrid.uniform(1.0, 2)
    p = DiscretePath(g, np.array([0.0, 1.0]))
    with pytest.warns(LevelWarning):
        r = pathwise_qv(p, 1, 8, 1e-3)
    assert not r.in_omega
    assert r.excluded_levels == [1, 2, 3, 4, 5, 6, 7, 8]


def test_rejects_bad_arguments():
    p = linear_path()
    with pytest.raises(ValueError):
        pathwise_qv(p, 3, 2, 1e-3)
    with pytest.raises(ValueError):
        pathwise_qv(p, 1, 3, 0.0)


def test_not_cauchy_reports_reason():
    p = brownian_path(3, n_points=2**10 + 1)
    r = pathwise_qv_quiet(p, QvConfig(1, 6, 1e-9))
    assert not r.in_omega and "Cauchy" in r.reason


def test_qv_json_export():
    r = pathwise_qv_quiet(brownian_path(0, n_points=1025), QvConfig(1, 5, 1e-2))
    d = json.loads(json.dumps(r.to_json()))
    assert set(d) >= {"levels", "gaps", "qv", "in_omega", "tol"}
    assert len(d["gaps"]) == len(d["levels"]) - 1


# --- simple integrals ------------------------------------------------------


def test_integral_S_examples():
    p = brownian_path(1, n_points=257, s0=1.0)
    one = SimpleStrategy.hold(1.0)
    assert integral_S(one, p).values[-1] == pytest.approx(p.values[-1] - p.values[0], abs=1e-15)
    late = SimpleStrategy.hold(3.0, entry=StoppingRule("time", 1.0))
    assert np.all(integral_S(late, p).values == 0.0)
    lin = linear_path(9)
    half = SimpleStrategy.hold(2.0, exit=StoppingRule("time", 0.5))
    assert integral_S(half, lin).values[-1] == pytest.approx(1.0)
    assert integral_S(one, p).values[0] == 0.0


def test_integral_SS_refuses_off_omega():
    p = brownian_path(3, n_points=2**10 + 1)
    r = pathwise_qv_quiet(p, QvConfig(1, 6, 1e-9))
    with pytest.raises(NotInOmegaError):
        integral_SS(SimpleStrategy.hold(1.0), p, r)


def test_integral_SS_examples():
    lin = linear_path(2**14 + 1)
    r = pathwise_qv_quiet(lin, QvConfig(1, 12, 1e-3))
    assert r.in_omega
    ss = integral_SS(SimpleStrategy.hold(1.0), lin, r)
    assert ss.values[-1] == pytest.approx(r.s_limit.values[-1], abs=1e-15)
    assert ss.values[-1] == pytest.approx(0.5, abs=1e-3)
    assert np.all(integral_SS(SimpleStrategy.zero(), lin, r).values == 0.0)


def test_generalized_integral_degenerate_cases():
    p = brownian_path(5, n_points=2**12 + 1)
    r = pathwise_qv_quiet(p, QvConfig(1, 6, 5e-2))
    assert r.in_omega
    H = SimpleStrategy.hold(0.7, exit=StoppingRule("price_above", 0.05))
    G = SimpleStrategy.hold(1.0)
    g0 = generalized_integral(H, SimpleStrategy.zero(), p, r)
    assert np.array_equal(g0.total.values, integral_S(H, p).values)
    g1 = generalized_integral(SimpleStrategy.zero(), G, p, r)
    assert np.allclose(g1.total.values, integral_SS(G, p, r).values, atol=1e-15)


def test_generalized_integral_converges_in_level():
    p = brownian_path(7)
    r = pathwise_qv_quiet(p, QvConfig(1, 7, 5e-2))
    gi = generalized_integral(SimpleStrategy.zero(), SimpleStrategy.hold(1.0), p, r)
    gaps = [gi.gaps[m] for m in sorted(gi.gaps)]
    assert gaps[-1] < 1e-12  # finest level is the limit candidate itself
    assert all(b <= a for a, b in zip(gaps[:-2], gaps[1:-1])) or gaps[-2] < gaps[0]


def strategy_strategy():
    rule = st.sampled_from(
        [StoppingRule("start"), StoppingRule("never"), StoppingRule("time", 0.3), StoppingRule("time", 0.8),
         StoppingRule("price_above", 0.1), StoppingRule("price_below", -0.1), StoppingRule("move", 0.05)]
    )
    hold = st.one_of(
        st.builds(lambda a: Holding("const", a), st.floats(-3, 3)),
        st.builds(lambda a, b: Holding("price", a, b), st.floats(-3, 3), st.floats(-1, 1)),
    )
    leg = st.builds(Leg, rule, rule, hold, st.floats(-2, 2))
    return st.builds(lambda legs: SimpleStrategy(tuple(legs)), st.lists(leg, max_size=3))


@given(strategy_strategy(), strategy_strategy(), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_linearity(H1, H2, a, b, seed):
    p = random_walk(seed, n=80)
    combo = H1.scale(a) + H2.scale(b)
    lhs = integral_S(combo, p).values
    rhs = a * integral_S(H1, p).values + b * integral_S(H2, p).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * (1 + np.max(np.abs(rhs)))


@given(strategy_strategy(), st.integers(0, 1000), st.data())
def test_stop_commutes_with_integral(H, seed, data):
    p = random_walk(seed, n=60)
    k = data.draw(st.integers(0, 59))
    t = p.times[k]
    assert integral_S(H, p).values[k] == pytest.approx(integral_S(H, stop_at(p, t)).values[-1], abs=1e-12)


def test_entry_before_exit():
    p = random_walk(1)
    leg = Leg(StoppingRule("time", 0.6), StoppingRule("time", 0.2), Holding("const", 1.0))
    a, b = leg.window(p)
    assert a <= b


def test_strategy_dict_roundtrip():
    H = SimpleStrategy((Leg(StoppingRule("move", 0.1), StoppingRule("time", 0.9), Holding("price", 2.0, 0.5), 0.5),))
    assert SimpleStrategy.from_dict(json.loads(json.dumps(H.to_dict()))) == H


# --- transfer to the lifted space ------------------------------------------


def test_transfer_exact_on_graph():
    cfg = QvConfig(1, 7, 5e-2)
    p = brownian_path(11)
    lp, res = lift_path(p, cfg)
    assert res.in_omega
    H = SimpleStrategy.hold(1.5, exit=StoppingRule("move", 0.1))
    G = SimpleStrategy.hold(-0.5, entry=StoppingRule("time", 0.25))
    pair = transfer_strategy_up(H, G, cfg)
    orig = integral_S(H, p).values + integral_SS(G, p, res).values
    assert np.max(np.abs(pair.integral(lp).values - orig)) <= 1e-12
    assert np.max(np.abs(transfer_strategy_down(pair)(p).values - orig)) <= 1e-12


def test_transfer_trivial_cases():
    cfg = QvConfig(1, 7, 5e-2)
    p = brownian_path(12)
    lp, _ = lift_path(p, cfg)
    zero = transfer_strategy_up(SimpleStrategy.zero(), SimpleStrategy.zero(), cfg)
    assert np.all(zero.integral(lp).values == 0.0)
    one = transfer_strategy_up(SimpleStrategy.hold(1.0), SimpleStrategy.zero(), cfg)
    assert one.integral(lp).values[-1] == pytest.approx(p.values[-1] - p.values[0], abs=1e-15)


def test_transfer_vanishes_off_graph():
    cfg = QvConfig(1, 7, 5e-2)
    p = brownian_path(13)
    lp, _ = lift_path(p, cfg)
    shifted = LiftedPath(p, lp.qv.with_values(lp.qv.values * 1.01))
    pair = transfer_strategy_up(SimpleStrategy.hold(1.0), SimpleStrategy.hold(1.0), cfg)
    assert not pair.on_graph(shifted)
    assert np.all(pair.integral(shifted).values == 0.0)
