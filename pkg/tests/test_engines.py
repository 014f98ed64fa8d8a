from fractions import Fraction

import numpy as np
import pytest

from pnrt.design import Bernoulli, CompleteRandomization, EnumeratedPool, enumerate_support
from pnrt.engines import (
    ConditioningEvent,
    compare,
    crt,
    exhaustive_pval,
    frt,
    naive_rt,
    pnrt_min,
    pnrt_pair,
)
from pnrt.errors import InputError
from pnrt.network import DenseProximity
from pnrt.stats import OutcomeData, StatisticSpec

from conftest import TOY_Y, ring, unit

SPEC = StatisticSpec(eps_s=0, eps_c=1)
SHARP = StatisticSpec(eps_s=-1, eps_c=0)


def frac(x):
    return Fraction(float(x)).limit_denominator(1000)


def test_toy_exhaustive_pvalues(hexagon, toy_data, d_obs, toy_mech):
    ex = lambda eng, spec: exhaustive_pval(eng, spec, toy_data, d_obs, toy_mech, hexagon).pval  # noqa: E731
    assert frac(ex("frt", SHARP)) == Fraction(2, 3)
    assert frac(ex("naive", SPEC)) == Fraction(1, 6)
    assert frac(ex("pair", SPEC)) == Fraction(2, 6)
    assert frac(ex("min", SPEC)) == Fraction(1, 2)


def test_toy_statistic_columns(hexagon, toy_data, d_obs, toy_mech):
    r = exhaustive_pval("pair", SPEC, toy_data, d_obs, toy_mech, hexagon)
    T, Tobs = r.draws
    assert [frac(v) for v in T] == [Fraction(17, 6), Fraction(2, 3), 2, 2, Fraction(1, 2), 1]
    assert [frac(v) for v in Tobs] == [Fraction(17, 6), Fraction(10, 3), 3, 2, Fraction(7, 2),
                                       Fraction(7, 3)]


def test_toy_crt_event(hexagon, toy_data, d_obs):
    ev = ConditioningEvent(unit(6, 1, 3, 5), [unit(6, 0), unit(6, 2), unit(6, 4)])
    r = crt(SPEC, toy_data, d_obs, ev, hexagon, mode="exhaustive")
    assert np.allclose(r.draws[0], [4.5, 3, 1.5])
    assert frac(r.pval) == Fraction(1, 3)


def test_crt_single_assignment_and_mutation(hexagon, toy_data, d_obs):
    ev = ConditioningEvent(unit(6, 1, 3, 5), [unit(6, 0)])
    assert crt(SPEC, toy_data, d_obs, ev, hexagon, mode="exhaustive").pval == 1.0
    ev = ConditioningEvent(unit(6, 1, 3, 5), [unit(6, 0), unit(6, 2), unit(6, 4)])
    y = np.array(TOY_Y)
    y[2] = 100.0  # not focal
    a = crt(SPEC, toy_data, d_obs, ev, hexagon, mode="exhaustive")
    b = crt(SPEC, OutcomeData(y), d_obs, ev, hexagon, mode="exhaustive")
    assert np.array_equal(a.draws[0], b.draws[0])


def test_crt_rejects_bad_events(hexagon, toy_data, d_obs):
    # focal unit 0 is treated under the observed assignment
    bad = ConditioningEvent(unit(6, 0, 3), [unit(6, 0), unit(6, 2)])
    with pytest.raises(InputError, match="imputable"):
        crt(SPEC, toy_data, d_obs, bad, hexagon)
    ev = ConditioningEvent(unit(6, 3), [unit(6, 1), unit(6, 5)])
    with pytest.raises(InputError):
        crt(SPEC, toy_data, d_obs, ev, hexagon)


def test_crt_monte_carlo_converges(hexagon, toy_data, d_obs):
    ev = ConditioningEvent(unit(6, 1, 3, 5), [unit(6, 0), unit(6, 2), unit(6, 4)])
    r = crt(SPEC, toy_data, d_obs, ev, hexagon, R=4000, seed=1)
    assert abs(r.pval - 1 / 3) < 5 / np.sqrt(4000)


@pytest.mark.parametrize("engine,exact", [("frt", 2 / 3), ("naive", 1 / 6), ("pair", 1 / 3),
                                          ("min", 1 / 2)])
def test_monte_carlo_close_to_exact(engine, exact, hexagon, toy_data, d_obs, toy_mech):
    spec = SHARP if engine == "frt" else SPEC
    fn = {"frt": frt, "naive": naive_rt, "pair": pnrt_pair, "min": pnrt_min}[engine]
    r = fn(spec, toy_data, d_obs, toy_mech, hexagon, R=10000, seed=11)
    assert abs(r.pval - exact) <= 5 / np.sqrt(10000)


def test_levels_and_decisions(hexagon, toy_data, d_obs, toy_mech):
    r = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=50)
    assert r.level_used == 0.025
    r = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=50, unadjusted=True)
    assert r.level_used == 0.05 and any("unadjusted" in w for w in r.warnings)
    r = naive_rt(SPEC, toy_data, d_obs, toy_mech, hexagon, R=50)
    assert any("NOT VALID" in w for w in r.warnings)
    r = exhaustive_pval("pair", SPEC, toy_data, d_obs, toy_mech, hexagon, alpha=0.7)
    assert r.rejected and r.level_used == 0.35


def test_pvalue_formula_and_draw_storage(hexagon, toy_data, d_obs, toy_mech):
    r = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=300, seed=2)
    T, Tobs = r.draws
    ge = (T >= Tobs - 1e-12).sum()
    assert r.pval == (1 + ge) / 301
    big = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=10001, seed=2)
    assert big.draws is None


def test_min_uses_smallest_observed_orientation(hexagon, toy_data, d_obs, toy_mech):
    r = pnrt_min(SPEC, toy_data, d_obs, toy_mech, hexagon, R=400, seed=5)
    T, Tobs = r.draws
    t_tilde = min(17 / 6, Tobs.min())
    assert np.isclose(r.diagnostics["T_tilde"], t_tilde)
    assert r.pval == (1 + (T >= t_tilde - 1e-12).sum()) / 401


def test_tie_rules(hexagon, toy_data, d_obs, toy_mech):
    a = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=500, seed=3)
    b = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=500, seed=3, tie_rule="half_discount")
    c = pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, R=500, seed=3, tie_rule="uniform_break")
    assert a.n_tie > 0
    assert np.isclose(b.pval, a.pval - 0.5 * a.n_tie / 501)
    assert a.pval - a.n_tie / 501 <= c.pval <= a.pval
    with pytest.raises(InputError):
        pnrt_pair(SPEC, toy_data, d_obs, toy_mech, hexagon, tie_rule="coin")
    e = exhaustive_pval("pair", SPEC, toy_data, d_obs, toy_mech, hexagon, tie_rule="half_discount")
    assert frac(e.pval) == Fraction(1, 3) - Fraction(1, 2) * frac(e.n_tie)


def test_compare_tolerance():
    ge, tie = compare(np.array([1.0, 1.0 + 1e-13, 0.999, np.inf]), np.array([1.0, 1.0, 1.0, np.inf]))
    assert ge.tolist() == [True, True, False, True]
    assert tie.tolist() == [True, True, False, True]


def test_no_decision_when_nothing_imputable(toy_data, d_obs, toy_mech):
    G = ring(6)
    spec = StatisticSpec(eps_s=3, eps_c=4)  # every unit within distance 3
    r = pnrt_pair(spec, toy_data, d_obs, toy_mech, G, R=20)
    assert r.no_decision and r.pval == 1.0


def test_workers_do_not_change_results(hexagon, toy_data, d_obs, toy_mech):
    a = pnrt_min(SPEC, toy_data, d_obs, toy_mech, hexagon, R=2000, seed=9, workers=1)
    b = pnrt_min(SPEC, toy_data, d_obs, toy_mech, hexagon, R=2000, seed=9, workers=3)
    assert a.pval == b.pval and np.array_equal(a.draws[0], b.draws[0])


def test_pool_mechanism_matches_generic(hexagon, toy_data, d_obs):
    B, _ = enumerate_support(CompleteRandomization(6, 1))
    pool = EnumeratedPool(B)
    r = exhaustive_pval("pair", SPEC, toy_data, d_obs, pool, hexagon)
    assert frac(r.pval) == Fraction(1, 3)
    mc = pnrt_pair(SPEC, toy_data, d_obs, pool, hexagon, R=3000, seed=4)
    assert abs(mc.pval - 1 / 3) < 5 / np.sqrt(3000)


def test_bernoulli_exhaustive_is_probability_weighted():
    G = ring(5)
    data = OutcomeData([1.0, 4.0, 2.0, 8.0, 5.0])
    mech = Bernoulli(5, 0.3)
    d0 = unit(5, 0)
    r = exhaustive_pval("pair", SPEC, data, d0, mech, G)
    B, p = enumerate_support(mech)
    # brute force straight from evaluate()
    from pnrt.stats import evaluate
    tot = sum(pr for b, pr in zip(B, p)
              if evaluate(SPEC, data, d0, b, G) >= evaluate(SPEC, data, b, d0, G) - 1e-12)
    assert np.isclose(r.pval, tot)


def test_input_checks(hexagon, toy_mech, d_obs):
    with pytest.raises(InputError):
        pnrt_pair(SPEC, OutcomeData([1.0, 2.0]), d_obs, toy_mech, hexagon)
    with pytest.raises(InputError):
        pnrt_pair(SPEC, OutcomeData(TOY_Y), d_obs, toy_mech, hexagon, alpha=1.5)
    with pytest.raises(InputError):
        pnrt_pair(SPEC, OutcomeData(TOY_Y), d_obs, toy_mech, hexagon, R=0)


def test_result_serialization(hexagon, toy_data, d_obs, toy_mech):
    r = exhaustive_pval("min", SPEC, toy_data, d_obs, toy_mech, hexagon)
    d = r.to_dict(with_draws=True)
    assert d["engine"] == "min" and len(d["draws"]["T"]) == 6
    assert "p-value" in r.to_text()
    assert '"pval"' in r.to_json()


def test_isolated_unit_flagged_and_kept_as_control():
    inf = np.inf
    M = np.array([[0, 1, 2, inf], [1, 0, 1, inf], [2, 1, 0, inf], [inf, inf, inf, 0]])
    G = DenseProximity(M, ["a", "b", "c", "z"])
    d = np.array([True, False, False, False])
    assert G.interval_codes(d, (0, 1)).tolist() == [0, 1, 2, 2]
    r = exhaustive_pval("pair", StatisticSpec(eps_s=0, eps_c=1), OutcomeData(np.arange(4.0)), d,
                        CompleteRandomization(4, 1), G)
    assert r.diagnostics["isolated_units"] == ["z"]


def test_min_exact_mode_uses_support_minimum(hexagon, toy_mech, d_obs, toy_data):
    spec = StatisticSpec(eps_s=0, eps_c=1)
    ex = exhaustive_pval("min", spec, toy_data, d_obs, toy_mech, hexagon)
    mc = pnrt_min(spec, toy_data, d_obs, toy_mech, hexagon, R=3, seed=0, min_mode="exact")
    assert mc.diagnostics["T_tilde"] == ex.diagnostics["T_tilde"]
    with pytest.raises(InputError):
        pnrt_min(spec, toy_data, d_obs, toy_mech, hexagon, R=3, min_mode="greedy")
