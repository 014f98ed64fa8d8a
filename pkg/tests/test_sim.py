import numpy as np
import pytest

from pnrt.design import CompleteRandomization, enumerate_support
from pnrt.engines import exhaustive_pval, pnrt_min, pnrt_pair
from pnrt.errors import InputError
from pnrt.network import CoordinateProximity
from pnrt.sim import (
    POWER_HEADER,
    SimConfig,
    build_setup,
    draw_control,
    exhaustive_rejection_prob,
    gen_network,
    gen_schedule,
    imputation_table,
    interval_populations,
    oracle_schedule,
    run_power_study,
    run_size_study,
)
from pnrt.stats import OutcomeData, StatisticSpec

from conftest import TOY_Y, ring, unit


def small_cfg(**kw):
    base = dict(N=80, n_hotspots=8, n_treated=3, taus=(0.0, 1.0), sims=6, R=60, pool_size=50, seed=3)
    base.update(kw)
    return SimConfig(**base)


def test_config_validation():
    with pytest.raises(InputError):
        SimConfig(n_treated=30)
    with pytest.raises(InputError):
        SimConfig(taus=(-1.0,))
    with pytest.raises(InputError):
        SimConfig(engines=("frt", "naive"))
    with pytest.raises(InputError):
        SimConfig(hypotheses=(2,))
    with pytest.raises(InputError):
        SimConfig.from_dict({"N": 10, "bogus": 1})
    d = SimConfig().to_dict()
    assert SimConfig.from_dict(d) == SimConfig()


def test_default_network_shape():
    cfg = SimConfig()
    coords, hot = gen_network(cfg)
    assert coords.shape == (1000, 2) and hot.sum() == 20
    assert np.all((coords >= 0) & (coords <= 1))


def test_schedule_rules():
    G = ring(4)
    cfg = SimConfig(N=4, n_hotspots=2, n_treated=1, thresholds=(0, 1, 2))
    sched = gen_schedule(cfg, unit(4, 0, 1), 3.0, G=G, base_control=[2.3, 0.4, 1.0, 1.0])
    assert np.allclose(sched.outcomes(unit(4, 0)), [1.3, 3.4, 2.5, 4.0])
    assert np.allclose(sched.outcomes(unit(4, 1)), [5.3, 0.0, 4.0, 2.5])
    assert sched.outcome(0, unit(4, 0)) == pytest.approx(1.3)


def test_pure_control_band():
    G = ring(8)
    cfg = SimConfig(N=8, n_hotspots=1, n_treated=1, thresholds=(0, 1, 2))
    sched = gen_schedule(cfg, unit(8, 0), 1.0, G=G, base_control=np.zeros(8))
    # distances 0..4 from unit 0 on the 8-ring
    assert sched.outcomes(unit(8, 0)).tolist() == [0, 1, 0.5, 0, 0, 0, 0.5, 1]


def test_zero_tau_satisfies_null():
    cfg = small_cfg()
    setup = build_setup(cfg)
    sched = gen_schedule(cfg, setup.hotspots, 0.0, G=setup.G, base_control=setup.base_control)
    for d in setup.pool.assignments[:20]:
        y = sched.outcomes(d)
        assert np.array_equal(y[~d], setup.base_control[~d])


def test_gamma_mean():
    cfg = SimConfig()
    rng = np.random.default_rng(0)
    y = draw_control(cfg, np.zeros(100_000, bool), rng)
    mu = 0.086 * 3.081
    sd = np.sqrt(0.086) * 3.081
    assert abs(y.mean() - mu) <= 3 * sd / np.sqrt(y.size)


def test_degenerate_covariance_single_interval():
    cfg = SimConfig(N=50, n_hotspots=5, n_treated=2, cov=((0, 0), (0, 0)), background=0.0,
                    pool_size=10)
    coords, _ = gen_network(cfg)
    assert np.all(coords == 0.5)
    setup = build_setup(cfg)
    codes = setup.G.interval_codes(setup.pool.assignments, cfg.thresholds)
    assert np.all(codes == 0)


def test_calibration_gate():
    """Interval populations at the defaults, averaged over seeds, within 25% of 420/250/320."""
    target = np.array([420, 250, 320])
    pops = np.array([interval_populations(SimConfig(seed=s), draws=20) for s in range(5)])
    mean = pops.mean(axis=0)
    assert np.all(np.abs(mean - target) <= 0.25 * target), mean


def test_imputation_pattern_matches_toy_table(hexagon):
    B, _ = enumerate_support(CompleteRandomization(6, 1))
    tab = imputation_table(hexagon, unit(6, 0), TOY_Y, 0.0, B)
    assert np.array_equal(tab[0], TOY_Y)
    for j in range(1, 6):
        missing = np.flatnonzero(np.isnan(tab[j])).tolist()
        assert missing == [0, j]


def test_oracle_schedule_respects_null(hexagon):
    sched = oracle_schedule(hexagon, 0.0, seed=1, style="heavy")
    B, _ = enumerate_support(CompleteRandomization(6, 2))
    for d in B:
        y = sched.outcomes(d)
        assert np.array_equal(y[~d], sched.base[~d])
    a = sched.outcomes(B[0])
    assert np.array_equal(a, sched.outcomes(B[0]))
    with pytest.raises(InputError):
        oracle_schedule(hexagon, 0.0, style="zigzag").outcomes(B[0])


def test_oracle_beyond_eps_only():
    G = ring(8)
    sched = oracle_schedule(G, 1.0, seed=2)
    d = unit(8, 0)
    y = sched.outcomes(d)
    far = G.exposure(d) > 1
    assert np.array_equal(y[far], sched.base[far])
    assert not np.allclose(y[~far], sched.base[~far])


def test_constant_schedule_gives_pvalue_one(hexagon, toy_mech, d_obs):
    data = OutcomeData(np.full(6, 2.0))
    spec = StatisticSpec(eps_s=0, eps_c=1)
    for eng in ("frt", "naive", "pair", "min"):
        assert exhaustive_pval(eng, spec, data, d_obs, toy_mech, hexagon).pval == 1.0


def test_exhaustive_validity_small():
    G = CoordinateProximity(np.random.default_rng(5).random((7, 2)))
    mech = CompleteRandomization(7, 2)
    spec = StatisticSpec(eps_s=0, eps_c=0.3)
    for style in ("noise", "high", "low", "heavy"):
        sched = oracle_schedule(G, 0.0, seed=4, style=style)
        for a in (0.1, 0.2, 0.5):
            assert exhaustive_rejection_prob(pnrt_pair, spec, sched, mech, G, a / 2) < a
            assert exhaustive_rejection_prob(pnrt_min, spec, sched, mech, G, a) <= a + 1e-12


def test_power_study_table_and_determinism():
    cfg = small_cfg()
    t1 = run_power_study(cfg)
    t2 = run_power_study(SimConfig.from_dict({**cfg.to_dict(), "workers": 2}))
    assert t1.to_csv() == t2.to_csv()
    header = t1.to_csv().splitlines()[0]
    assert header == ",".join(POWER_HEADER)
    r = t1.rate("pair", 1.0)
    assert r["sims"] == 6 and 0 <= r["rate"] <= 1
    assert np.isclose(r["se"], np.sqrt(r["rate"] * (1 - r["rate"]) / 6))
    assert len(t1.rows) == 4 * 2


def test_pair_rates_nested():
    t = run_power_study(small_cfg(sims=10))
    for tau in (0.0, 1.0):
        assert t.rate("pair", tau)["rate"] >= t.rate("pair_half", tau)["rate"]


def test_size_study_only_null():
    t = run_size_study(small_cfg(engines=("pair_half",)))
    assert [r["tau"] for r in t.rows] == [0.0]


def test_power_monotone_in_tau():
    cfg = small_cfg(N=150, n_hotspots=10, n_treated=4, taus=(0.0, 0.5, 1.0, 2.0), sims=30,
                    R=100, engines=("pair",))
    t = run_power_study(cfg)
    rates = [t.rate("pair", tau) for tau in cfg.taus]
    for lo, hi in zip(rates, rates[1:]):
        sigma = max(lo["se"], hi["se"], 1 / cfg.sims)
        assert hi["rate"] >= lo["rate"] - 2 * sigma


def test_sim_pool_treats_hotspots_only():
    cfg = small_cfg()
    setup = build_setup(cfg)
    assert setup.pool.size == cfg.pool_size
    assert setup.pool.assignments[:, ~setup.hotspots].sum() == 0
    assert np.all(setup.pool.assignments.sum(axis=1) == cfg.n_treated)
