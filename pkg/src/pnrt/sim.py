"""Spatial spillover simulation and brute-force oracle schedules.

The study places units on the unit square, marks a few hotspots, treats a
subset of hotspots and generates outcomes with a distance-decaying spillover of
size ``tau``. Every random quantity is derived from the master seed through a
fixed key path (master -> tau -> sim -> replicate), so the power table does not
depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .design import EnumeratedPool, StratifiedComplete, as_assignment, enumerate_support, stream_rng
from .engines import pnrt_min, pnrt_pair, frt
from .errors import InputError
from .network import CoordinateProximity, DistanceThresholds
from .stats import OutcomeData, StatisticSpec

# seed key roots
_NET, _POOL, _BASE, _DOBS, _REPL = 0, 1, 2, 3, 4

SIM_ENGINES = ("frt", "min", "pair_half", "pair")
POWER_HEADER = ("engine", "tau", "k", "rejections", "sims", "rate", "se")


@dataclass
class SimConfig:
    """Simulation settings. Defaults are the desk-scale study.

    Units come from a truncated Gaussian core plus a ``background`` share drawn
    uniformly on the square. ``redraw_control`` draws fresh control outcomes
    for every simulation instead of holding them fixed.
    """

    N: int = 1000
    n_hotspots: int = 20
    n_treated: int = 7
    mean: tuple = (0.5, 0.5)
    cov: tuple = ((0.005, 0.0025), (0.0025, 0.005))
    background: float = 0.55
    hotspot_core_share: Optional[float] = None
    thresholds: tuple = (0.0, 0.1, 0.2)
    taus: tuple = tuple(round(x, 10) for x in np.linspace(0.0, 1.0, 11))
    sims: int = 200
    R: int = 500
    pool_size: int = 1000
    seed: int = 0
    alpha: float = 0.05
    engines: tuple = SIM_ENGINES
    hypotheses: tuple = (0,)
    gamma_control: tuple = (0.086, 3.081)
    gamma_hotspot: tuple = (0.737, 1.778)
    statistic: str = "diff_in_means"
    sidedness: str = "one_sided_upper"
    redraw_control: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("mean", "thresholds", "taus", "engines", "hypotheses",
                     "gamma_control", "gamma_hotspot"):
            setattr(self, name, tuple(getattr(self, name)))
        self.cov = tuple(tuple(float(v) for v in row) for row in self.cov)
        if not 0 <= self.n_treated <= self.n_hotspots <= self.N:
            raise InputError("need 0 <= n_treated <= n_hotspots <= N")
        if any(t < 0 for t in self.taus):
            raise InputError("tau grid must be nonnegative")
        unknown = set(self.engines) - set(SIM_ENGINES)
        if unknown:
            raise InputError(f"unknown simulation engines {sorted(unknown)}; choose from {SIM_ENGINES}")
        grid = DistanceThresholds(self.thresholds)
        bad = [k for k in self.hypotheses if not 0 <= k < grid.K]
        if bad:
            raise InputError(f"hypotheses must lie in 0..{grid.K - 1}, got {bad}")
        if self.hotspot_core_share is not None and not 0 <= self.hotspot_core_share <= 1:
            raise InputError("hotspot_core_share must lie in [0, 1]")
        if not 0 <= self.background <= 1:
            raise InputError("background share must lie in [0, 1]")
        if self.sims < 1 or self.R < 1 or self.pool_size < 1:
            raise InputError("sims, R and pool_size must be positive")
        c = np.asarray(self.cov)
        if c.shape != (2, 2) or not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) < -1e-12):
            raise InputError("cov must be a symmetric positive semidefinite 2x2 matrix")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown simulation keys {sorted(unknown)}; allowed: {sorted(known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cov"] = [list(r) for r in self.cov]
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


# -- network and schedule ---------------------------------------------------

def _sample_points(cfg: SimConfig, rng) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=float)
    cov = np.asarray(cfg.cov, dtype=float)
    if not np.all((mean >= 0) & (mean <= 1)):
        raise InputError("gaussian mean must lie in the unit square")
    n_bg = int(rng.binomial(cfg.N, cfg.background))
    out = np.empty((0, 2))
    while out.shape[0] < cfg.N - n_bg:
        need = cfg.N - n_bg - out.shape[0]
        pts = rng.multivariate_normal(mean, cov, size=max(2 * need, 16), method="eigh")
        ok = np.all((pts >= 0) & (pts <= 1), axis=1)
        out = np.vstack([out, pts[ok][:need]])
    return np.vstack([out, rng.random((n_bg, 2))]), cfg.N - n_bg


def gen_network(cfg: SimConfig, rng=None):
    """Unit coordinates in ``[0,1]^2`` and a hotspot mask.

    Hotspots are uniform among all units by default. With
    ``hotspot_core_share`` set, that share of them is drawn from the Gaussian
    core and the rest from the uniform background.
    """
    rng = stream_rng(cfg.seed, _NET) if rng is None else rng
    coords, n_core = _sample_points(cfg, rng)
    hot = np.zeros(cfg.N, dtype=bool)
    if cfg.hotspot_core_share is None:
        hot[rng.choice(cfg.N, size=cfg.n_hotspots, replace=False)] = True
        return coords, hot
    n_in = int(round(cfg.hotspot_core_share * cfg.n_hotspots))
    n_out = cfg.n_hotspots - n_in
    if n_in > n_core or n_out > cfg.N - n_core:
        raise InputError("not enough core or background units for the requested hotspots")
    hot[rng.choice(n_core, size=n_in, replace=False)] = True
    hot[n_core + rng.choice(cfg.N - n_core, size=n_out, replace=False)] = True
    return coords, hot


def hotspot_mechanism(hotspots, n_treated: int) -> StratifiedComplete:
    """Complete randomization of ``n_treated`` units among the hotspots only."""
    hotspots = np.asarray(hotspots, dtype=bool)
    return StratifiedComplete(hotspots.astype(int).tolist(), {1: n_treated, 0: 0})


@dataclass
class PotentialOutcomeSchedule:
    """Outcomes as a deterministic function of the assignment.

    Treated units get ``max(yc - 1, 0)``; untreated units within ``eps_short``
    of a treated unit get ``yc + tau``; those in ``(eps_short, eps_long]`` get
    ``yc + tau/2``; the rest keep ``yc``.
    """

    base_control: np.ndarray
    hotspot_flags: np.ndarray
    tau: float
    thresholds: tuple
    G: object = field(repr=False)

    def outcomes(self, d) -> np.ndarray:
        d = as_assignment(d, self.base_control.size)
        e = self.G.exposure(d)
        eps_short, eps_long = self.thresholds
        yc = self.base_control
        y = yc.copy()
        y[(~d) & (e <= eps_short)] += self.tau
        y[(~d) & (e > eps_short) & (e <= eps_long)] += 0.5 * self.tau
        y[d] = np.maximum(yc[d] - 1.0, 0.0)
        return y

    def outcome(self, i: int, d) -> float:
        return float(self.outcomes(d)[i])


def draw_control(cfg: SimConfig, hotspots, rng) -> np.ndarray:
    hotspots = np.asarray(hotspots, dtype=bool)
    k0, s0 = cfg.gamma_control
    k1, s1 = cfg.gamma_hotspot
    yc = rng.gamma(k0, s0, size=hotspots.size)
    yc[hotspots] = rng.gamma(k1, s1, size=int(hotspots.sum()))
    return yc


def gen_schedule(cfg: SimConfig, hotspots, tau: float, rng=None, G=None,
                 base_control=None) -> PotentialOutcomeSchedule:
    rng = stream_rng(cfg.seed, _BASE) if rng is None else rng
    yc = draw_control(cfg, hotspots, rng) if base_control is None else np.asarray(base_control, float)
    return PotentialOutcomeSchedule(yc, np.asarray(hotspots, bool), float(tau), _bands(cfg), G)


def _bands(cfg: SimConfig) -> tuple:
    g = cfg.thresholds
    return (g[1], g[2] if len(g) > 2 else np.inf)


# -- power study ------------------------------------------------------------

@dataclass
class SimSetup:
    cfg: SimConfig
    G: CoordinateProximity
    hotspots: np.ndarray
    pool: EnumeratedPool
    base_control: np.ndarray


def build_setup(cfg: SimConfig) -> SimSetup:
    coords, hot = gen_network(cfg)
    G = CoordinateProximity(coords)
    mech = hotspot_mechanism(hot, cfg.n_treated)
    bits, _ = mech.sample_block(stream_rng(cfg.seed, _POOL), cfg.pool_size)
    pool = EnumeratedPool(bits)
    yc = draw_control(cfg, hot, stream_rng(cfg.seed, _BASE))
    return SimSetup(cfg, G, hot, pool, yc)


def interval_populations(cfg: SimConfig, setup: Optional[SimSetup] = None, draws: int = 50):
    """Average unit counts per interval of the threshold grid over pool draws.

    Returns a list with one entry per interval ``(eps_0, eps_1], ..., (eps_K, inf)``.
    """
    setup = setup or build_setup(cfg)
    codes = setup.G.interval_codes(setup.pool.assignments[:draws], cfg.thresholds)
    K1 = len(cfg.thresholds)
    return [float((codes == j).sum(axis=1).mean()) for j in range(1, K1 + 1)]


def _one_sim(setup: SimSetup, ti: int, tau: float, s: int) -> dict:
    """Rejection indicators for every (engine, k) in one simulation."""
    cfg = setup.cfg
    ridx = int(stream_rng(cfg.seed, _DOBS, ti, s).integers(setup.pool.size))
    d_obs = setup.pool.assignments[ridx]
    yc = setup.base_control
    if cfg.redraw_control:
        yc = draw_control(cfg, setup.hotspots, stream_rng(cfg.seed, _BASE, ti, s))
    sched = PotentialOutcomeSchedule(yc, setup.hotspots, tau, _bands(cfg), setup.G)
    data = OutcomeData(sched.outcomes(d_obs))
    out = {}
    for k in cfg.hypotheses:
        spec = StatisticSpec(eps_s=cfg.thresholds[k], eps_c=cfg.thresholds[k + 1],
                             kind=cfg.statistic, sidedness=cfg.sidedness)
        kw = dict(seed=cfg.seed, stream=(_REPL, ti, s), store_draws=False)
        if "frt" in cfg.engines:
            r = frt(spec, data, d_obs, setup.pool, setup.G, cfg.R, cfg.alpha, **kw)
            out[("frt", k)] = r.rejected
        if "min" in cfg.engines:
            r = pnrt_min(spec, data, d_obs, setup.pool, setup.G, cfg.R, cfg.alpha, **kw)
            out[("min", k)] = r.rejected
        if "pair" in cfg.engines or "pair_half" in cfg.engines:
            r = pnrt_pair(spec, data, d_obs, setup.pool, setup.G, cfg.R, cfg.alpha, **kw)
            if "pair_half" in cfg.engines:
                out[("pair_half", k)] = (not r.no_decision) and r.pval <= cfg.alpha / 2
            if "pair" in cfg.engines:
                out[("pair", k)] = (not r.no_decision) and r.pval <= cfg.alpha
    return out


def _run_chunk(args):
    cfg_dict, jobs = args
    setup = build_setup(SimConfig.from_dict(cfg_dict))
    return [(ti, s, _one_sim(setup, ti, tau, s)) for ti, tau, s in jobs]


@dataclass
class PowerTable:
    rows: list
    config: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(POWER_HEADER)
        for r in self.rows:
            w.writerow([r["engine"], f"{r['tau']:g}", r["k"], r["rejections"], r["sims"],
                        f"{r['rate']:.6f}", f"{r['se']:.6f}"])
        return buf.getvalue()

    def rate(self, engine: str, tau: float, k: int = 0) -> dict:
        for r in self.rows:
            if r["engine"] == engine and math.isclose(r["tau"], tau) and r["k"] == k:
                return r
        raise KeyError((engine, tau, k))

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": self.rows}


def run_power_study(cfg: SimConfig, progress=None) -> PowerTable:
    """Rejection rates per (engine, tau, k) with binomial standard errors."""
    if cfg.sims * len(cfg.taus) * cfg.R > 5e8:
        warnings.warn("full-scale simulation requested; expect a long runtime", RuntimeWarning)
    jobs = [(ti, tau, s) for ti, tau in enumerate(cfg.taus) for s in range(cfg.sims)]
    counts: dict = {}
    workers = max(1, int(cfg.workers or 1))
    if workers == 1:
        setup = build_setup(cfg)
        results = []
        for i, (ti, tau, s) in enumerate(jobs):
            results.append((ti, s, _one_sim(setup, ti, tau, s)))
            if progress is not None:
                progress(i + 1, len(jobs))
    else:
        size = -(-len(jobs) // (4 * workers))
        chunks = [jobs[i:i + size] for i in range(0, len(jobs), size)]
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = [x for part in ex.map(_run_chunk, [(cfg_dict, c) for c in chunks]) for x in part]
    for ti, s, out in results:
        for (eng, k), rej in out.items():
            counts[(eng, ti, k)] = counts.get((eng, ti, k), 0) + int(rej)
    rows = []
    for eng in cfg.engines:
        for k in cfg.hypotheses:
            for ti, tau in enumerate(cfg.taus):
                c = counts.get((eng, ti, k), 0)
                p = c / cfg.sims
                rows.append({"engine": eng, "tau": float(tau), "k": int(k), "rejections": c,
                             "sims": cfg.sims, "rate": p,
                             "se": math.sqrt(p * (1 - p) / cfg.sims)})
    return PowerTable(rows, cfg.to_dict())


def run_size_study(cfg: SimConfig, progress=None) -> PowerTable:
    """Power study restricted to tau = 0, where every tested null is true."""
    d = cfg.to_dict()
    d["taus"] = [0.0]
    return run_power_study(SimConfig.from_dict(d), progress)


# -- oracle schedules -------------------------------------------------------

@dataclass
class OracleSchedule:
    """Schedule satisfying the partial null at ``eps_s`` by construction.

    Units farther than ``eps_s`` from every treated unit always return their
    base outcome. Every other entry is a deterministic adversarial value keyed
    by ``(seed, unit, assignment)``.
    """

    G: object = field(repr=False)
    eps_s: float
    base: np.ndarray
    seed: int = 0
    style: str = "noise"
    scale: float = 10.0

    def _adversarial(self, d: np.ndarray) -> np.ndarray:
        key = int.from_bytes(np.packbits(d).tobytes(), "little")
        rng = stream_rng(self.seed, 7, key % (2**63), len(d))
        n = d.size
        if self.style == "noise":
            return self.scale * rng.standard_normal(n)
        if self.style == "high":
            return self.base + self.scale * (1 + rng.random(n))
        if self.style == "low":
            return self.base - self.scale * (1 + rng.random(n))
        if self.style == "heavy":
            return self.scale * rng.standard_cauchy(n)
        raise InputError(f"unknown oracle style {self.style!r}")

    def outcomes(self, d) -> np.ndarray:
        d = as_assignment(d, self.base.size)
        y = self.base.copy()
        near = ~(self.G.interval_codes(d, [self.eps_s]) >= 1)
        if np.any(near):
            y[near] = self._adversarial(d)[near]
        return y


def oracle_schedule(G, eps_s: float, seed: int = 0, style: str = "noise",
                    base=None) -> OracleSchedule:
    if base is None:
        base = stream_rng(seed, 8).standard_normal(G.n)
    return OracleSchedule(G, float(eps_s), np.asarray(base, dtype=float), seed, style)


def imputation_table(G, D_obs, y_obs, eps_s: float, assignments) -> np.ndarray:
    """Outcomes known under the partial null for each assignment (NaN = missing).

    Entry ``(d, i)`` is known when ``d`` is the observed assignment or ``i`` is
    imputable under both ``D_obs`` and ``d``.
    """
    D_obs = as_assignment(D_obs, G.n)
    y_obs = np.asarray(y_obs, dtype=float)
    B = np.atleast_2d(np.asarray(assignments, dtype=bool))
    imp_obs = G.interval_codes(D_obs, [eps_s]) >= 1
    imp = G.interval_codes(B, [eps_s]) >= 1
    known = imp & imp_obs[None, :]
    known[np.all(B == D_obs, axis=1)] = True
    return np.where(known, y_obs[None, :], np.nan)


def exhaustive_rejection_prob(engine_fn, spec: StatisticSpec, schedule, mech, G,
                              level: float, **kw) -> float:
    """``P(pval(D_obs) <= level)`` over every ``D_obs`` in the support (exact)."""
    B, p = enumerate_support(mech)
    total = 0.0
    for d, pd in zip(B, p):
        data = OutcomeData(schedule.outcomes(d))
        r = engine_fn(spec, data, d, mech, G, 0, 0.5, mode="exhaustive", **kw)
        if not r.no_decision and r.pval <= level + 1e-12:
            total += pd
    return total
