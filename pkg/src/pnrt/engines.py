"""Randomization test engines.

All engines share one replicate loop: draw blocks of assignments from the
mechanism, turn them into interval codes, evaluate the statistic in both
orientations and reduce to counts. ``mode="exhaustive"`` replaces sampling by
the full support of the mechanism with its probabilities.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .design import (
    EnumeratedPool,
    as_assignment,
    as_assignment_matrix,
    block_sizes,
    draw_block,
    enumerate_support,
)
from .errors import InputError
from .stats import (
    CONTROL,
    SPILLOVER,
    OutcomeData,
    StatisticSpec,
    batch_values,
    pair_values,
    sharp_values,
)

TIE_RULES = ("count_as_ge", "half_discount", "uniform_break")
ENGINES = ("frt", "naive", "pair", "min")
MODES = ("monte_carlo", "exhaustive")
STORE_LIMIT = 10**4
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class TieRule:
    """How ``T_r == T_obs`` is scored. ``uniform_break`` is experimental."""

    rule: str = "count_as_ge"

    def __post_init__(self):
        if self.rule not in TIE_RULES:
            raise InputError(f"tie rule must be one of {TIE_RULES}, got {self.rule!r}")

    @classmethod
    def of(cls, x) -> "TieRule":
        return x if isinstance(x, TieRule) else cls(x or "count_as_ge")


@dataclass
class TestResult:
    engine: str
    pval: float
    R: int
    n_ge: float
    n_tie: float
    decision: str  # "reject" | "accept" | "no_decision"
    alpha: float
    level_used: float
    mode: str
    tie_rule: str = "count_as_ge"
    draws: Optional[tuple] = field(default=None, repr=False)
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def rejected(self) -> bool:
        return self.decision == "reject"

    @property
    def no_decision(self) -> bool:
        return self.decision == "no_decision"

    def to_dict(self, with_draws: bool = False) -> dict:
        out = {
            "engine": self.engine,
            "pval": self.pval,
            "decision": self.decision,
            "alpha": self.alpha,
            "level_used": self.level_used,
            "R": self.R,
            "n_ge": self.n_ge,
            "n_tie": self.n_tie,
            "mode": self.mode,
            "tie_rule": self.tie_rule,
            "warnings": list(self.warnings),
            "diagnostics": dict(self.diagnostics),
        }
        if with_draws and self.draws is not None:
            out["draws"] = {"T": _json_floats(self.draws[0]), "T_obs": _json_floats(self.draws[1])}
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [
            ("engine", self.engine),
            ("p-value", f"{self.pval:.6g}"),
            ("decision", self.decision),
            ("level used", f"{self.level_used:g} (alpha {self.alpha:g})"),
            ("mode", self.mode),
            ("replicates", str(self.R)),
            ("count >=", f"{self.n_ge:g}"),
            ("ties", f"{self.n_tie:g}"),
            ("tie rule", self.tie_rule),
        ]
        w = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(w)}  {v}" for k, v in rows]
        lines += [f"warning: {m}" for m in self.warnings]
        return "\n".join(lines)


def _json_floats(a):
    return ["inf" if np.isinf(x) else float(x) for x in np.asarray(a, dtype=float)]


@dataclass
class ConditioningEvent:
    """User-supplied focal units and focal assignments (with conditional law)."""

    focal_units: np.ndarray
    focal_assignments: np.ndarray
    probabilities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.focal_units = as_assignment(self.focal_units)
        n = self.focal_units.size
        self.focal_assignments = as_assignment_matrix(self.focal_assignments, n)
        if self.focal_assignments.shape[0] == 0:
            raise InputError("conditioning event needs at least one focal assignment")
        self.pool = EnumeratedPool(self.focal_assignments, self.probabilities)

    def check(self, G, eps_s: float) -> None:
        """Every focal unit must be imputable under every focal assignment."""
        codes = G.interval_codes(self.focal_assignments, [eps_s])
        bad = self.focal_units & ~np.all(codes >= 1, axis=0)
        if np.any(bad):
            who = [G.ids[i] for i in np.flatnonzero(bad)]
            raise InputError(
                f"invalid conditioning event: focal units {who} are not imputable "
                f"under every focal assignment at eps_s={eps_s}"
            )

    def contains(self, d) -> bool:
        return self.pool.index_of(d) is not None


# -- comparison helpers -----------------------------------------------------

def compare(T: np.ndarray, Tobs) -> tuple:
    """``(ge, tie)`` indicators with a relative tolerance; inf ties inf."""
    T = np.asarray(T, dtype=float)
    Tobs = np.broadcast_to(np.asarray(Tobs, dtype=float), T.shape)
    with np.errstate(invalid="ignore"):
        tol = TIE_RTOL * np.maximum(1.0, np.abs(Tobs))
        close = np.abs(T - Tobs) <= tol
    tie = (T == Tobs) | close
    ge = (T > Tobs) | tie
    return ge, tie


def _codes(G, bits, idx, pool, thr):
    if idx is not None and pool is not None:
        return G.pool_codes(pool.assignments, thr)[idx]
    return G.interval_codes(bits, thr)


def _evaluate_rows(engine: str, spec, data, G, codes_obs, codes):
    """``(T, T_obs)`` per row of draw codes for one engine."""
    if engine == "frt":
        T, fl = sharp_values(spec, data, codes)
        return T, None, fl
    if engine == "naive":
        keep = np.broadcast_to(codes_obs >= SPILLOVER, codes.shape) & (codes >= SPILLOVER)
        T, fl = batch_values(spec, data, keep, keep & (codes == SPILLOVER), keep & (codes == CONTROL))
        return T, None, fl
    return pair_values(spec, data, codes_obs, codes)


def _observed(engine, spec, data, codes_obs):
    """The single reference statistic of frt / naive (same code path as draws)."""
    if engine == "frt":
        return float(sharp_values(spec, data, codes_obs[None, :])[0][0])
    keep = (codes_obs >= SPILLOVER)[None, :]
    v, _ = batch_values(spec, data, keep, keep & (codes_obs == SPILLOVER), keep & (codes_obs == CONTROL))
    return float(v[0])


def _check_inputs(spec, data, D_obs, G, alpha):
    if not isinstance(spec, StatisticSpec):
        raise InputError("spec must be a StatisticSpec")
    if not isinstance(data, OutcomeData):
        data = OutcomeData(data)
    if data.n != G.n:
        raise InputError(f"{data.n} outcomes for a network of {G.n} units")
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    return data, as_assignment(D_obs, G.n)


def _level(engine, alpha, unadjusted):
    return alpha / 2 if engine == "pair" and not unadjusted else alpha


def _decide(pval, level):
    return "reject" if pval <= level else "accept"


def _no_decision(engine, alpha, level, mode, R, tie_rule, why):
    return TestResult(engine, 1.0, R, 0.0, 0.0, "no_decision", alpha, level, mode,
                      tie_rule, warnings=[why])


def run_engine(engine: str, spec: StatisticSpec, data, D_obs, mech, G, R: int = 1000,
               alpha: float = 0.05, tie_rule="count_as_ge", *, seed: int = 0,
               mode: str = "monte_carlo", workers: int = 1, unadjusted: bool = False,
               store_draws: Optional[bool] = None, stream=(), cap: Optional[int] = None,
               min_mode: str = "sampled") -> TestResult:
    """Shared driver behind :func:`frt`, :func:`naive_rt`, :func:`pnrt_pair`, :func:`pnrt_min`."""
    if engine not in ENGINES:
        raise InputError(f"engine must be one of {ENGINES}, got {engine!r}")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    if min_mode not in ("sampled", "exact"):
        raise InputError(f"min_mode must be 'sampled' or 'exact', got {min_mode!r}")
    tie = TieRule.of(tie_rule).rule
    data, d0 = _check_inputs(spec, data, D_obs, G, alpha)
    level = _level(engine, alpha, unadjusted)
    thr = spec.thresholds
    codes_obs = G.interval_codes(d0, thr)
    warnings = []
    if engine == "naive":
        warnings.append("naive randomization test is NOT VALID under a partial null; shown for comparison")
    if engine == "pair" and unadjusted:
        warnings.append("pair engine decided at unadjusted alpha; no finite-sample guarantee")
    if engine != "frt" and not spec.sharp and not np.any(codes_obs >= SPILLOVER):
        res = _no_decision(engine, alpha, level, mode, R if mode == "monte_carlo" else 0, tie,
                           "no imputable units under the observed assignment")
        res.warnings = warnings + res.warnings
        return _flag_isolated(res, G)

    if mode == "exhaustive":
        res = _exhaustive(engine, spec, data, codes_obs, mech, G, tie, cap)
        res.alpha, res.level_used = alpha, level
        res.decision = _decide(res.pval, level)
        res.warnings = warnings + res.warnings
        return _flag_isolated(res, G)

    R = int(R)
    if R < 1:
        raise InputError("R must be at least 1")
    pool = mech if isinstance(mech, EnumeratedPool) else None
    sizes = block_sizes(R)

    def work(b):
        bits, idx, rng = draw_block(mech, seed, b, sizes[b], stream)
        codes = _codes(G, bits, idx, pool, thr)
        T, Tobs, fl = _evaluate_rows(engine, spec, data, G, codes_obs, codes)
        u = rng.random(sizes[b]) < 0.5 if tie == "uniform_break" else None
        return T, Tobs, fl, u

    if workers and workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(b) for b in range(len(sizes))]
    T = np.concatenate([p[0] for p in parts])
    flagged = int(sum(int(p[2].sum()) for p in parts))
    if engine in ("frt", "naive"):
        ref = _observed(engine, spec, data, codes_obs)
        Tobs = np.full(R, ref)
        cmp_to = ref
    else:
        Tobs = np.concatenate([p[1] for p in parts])
        if engine == "min":
            t_self = _observed("naive", spec, data, codes_obs)
            if min_mode == "exact":
                cmp_to = min(t_self, _support_min(spec, data, codes_obs, mech, G, cap))
            else:
                cmp_to = min(t_self, float(Tobs.min()))
        else:
            cmp_to = Tobs
    ge, ties = compare(T, cmp_to)
    n_tie = int(ties.sum())
    if tie == "count_as_ge":
        n_ge = float(ge.sum())
        pval = (1 + n_ge) / (1 + R)
    elif tie == "half_discount":
        n_ge = float(ge.sum())
        pval = (1 + n_ge - 0.5 * n_tie) / (1 + R)
    else:
        u = np.concatenate([p[3] for p in parts])
        hits = (ge & ~ties) | (ties & u)
        n_ge = float(hits.sum())
        pval = (1 + n_ge) / (1 + R)
    keep_draws = (R <= STORE_LIMIT) if store_draws is None else bool(store_draws)
    diag = {"flagged_draws": flagged}
    if engine == "min":
        diag["T_tilde"] = _finite_or_str(cmp_to)
    elif engine in ("frt", "naive"):
        diag["T_obs"] = _finite_or_str(cmp_to)
    if flagged:
        warnings.append(f"{flagged} draws had a degenerate regression or zero propensity")
    res = TestResult(engine, float(pval), R, n_ge, float(n_tie), _decide(pval, level), alpha,
                     level, "monte_carlo", tie, draws=(T, Tobs) if keep_draws else None,
                     warnings=warnings, diagnostics=diag)
    return _flag_isolated(res, G)


def _flag_isolated(res: TestResult, G) -> TestResult:
    # isolated units sit at infinite exposure, so they land in every pure-control group
    iso = np.flatnonzero(G.isolated)
    if iso.size:
        res.diagnostics["isolated_units"] = [str(G.ids[i]) for i in iso]
    return res


def _support_min(spec, data, codes_obs, mech, G, cap) -> float:
    # true minimum of the observed-side statistic over every assignment in the support
    B, _ = enumerate_support(mech) if cap is None else enumerate_support(mech, cap)
    _, Tobs, _ = _evaluate_rows("min", spec, data, G, codes_obs, G.interval_codes(B, spec.thresholds))
    return float(Tobs.min())


def _finite_or_str(x):
    return "inf" if np.isinf(x) else float(x)


def _wsum(p, mask) -> float:
    # fsum keeps e.g. six weights of 1/6 summing to exactly 1
    return math.fsum(p[np.asarray(mask, dtype=bool)])


def _exhaustive(engine, spec, data, codes_obs, mech, G, tie, cap):
    B, p = enumerate_support(mech) if cap is None else enumerate_support(mech, cap)
    codes = G.interval_codes(B, spec.thresholds)
    T, Tobs, fl = _evaluate_rows(engine, spec, data, G, codes_obs, codes)
    if engine in ("frt", "naive"):
        ref = _observed(engine, spec, data, codes_obs)
        Tobs = np.full(T.shape, ref)
        cmp_to = ref
    elif engine == "min":
        # true minimum over the support; D_obs is on the support for any real design
        cmp_to = min(float(Tobs.min()), _observed("naive", spec, data, codes_obs))
    else:
        cmp_to = Tobs
    ge, ties = compare(T, cmp_to)
    n_ge, n_tie = _wsum(p, ge), _wsum(p, ties)
    pval = n_ge - 0.5 * n_tie if tie != "count_as_ge" else n_ge
    pval = float(min(1.0, max(0.0, pval)))
    diag = {"support": int(B.shape[0]), "flagged_draws": int(fl.sum())}
    if engine == "min":
        diag["T_tilde"] = _finite_or_str(cmp_to)
    return TestResult(engine, pval, int(B.shape[0]), n_ge, n_tie, "accept", 0.0, 0.0,
                      "exhaustive", tie, draws=(T, Tobs), diagnostics=diag)


def frt(spec, data, D_obs, mech, G, R=1000, alpha=0.05, tie_rule="count_as_ge", **kw) -> TestResult:
    """Fisher randomization test: every unit treated as imputable."""
    return run_engine("frt", spec, data, D_obs, mech, G, R, alpha, tie_rule, **kw)


def naive_rt(spec, data, D_obs, mech, G, R=1000, alpha=0.05, tie_rule="count_as_ge", **kw) -> TestResult:
    """Unconditional test with the imputable set frozen at ``D_obs`` (not valid in general)."""
    return run_engine("naive", spec, data, D_obs, mech, G, R, alpha, tie_rule, **kw)


def pnrt_pair(spec, data, D_obs, mech, G, R=1000, alpha=0.05, tie_rule="count_as_ge", **kw) -> TestResult:
    """Pairwise-comparison test; decides at ``alpha/2`` unless ``unadjusted=True``."""
    return run_engine("pair", spec, data, D_obs, mech, G, R, alpha, tie_rule, **kw)


def pnrt_min(spec, data, D_obs, mech, G, R=1000, alpha=0.05, tie_rule="count_as_ge", **kw) -> TestResult:
    """Minimization test; compares every draw with the smallest observed-orientation value.

    Monte Carlo mode takes the minimum over the sampled draws plus ``D_obs``
    unless ``min_mode="exact"``, which minimizes over the enumerated support
    (so the mechanism must be enumerable). Exhaustive mode always does the latter.
    """
    return run_engine("min", spec, data, D_obs, mech, G, R, alpha, tie_rule, **kw)


def exhaustive_pval(engine: str, spec, data, D_obs, mech, G, tie_rule="count_as_ge",
                    alpha: float = 0.05, cap: Optional[int] = None, **kw) -> TestResult:
    """Exact probability-weighted p-value over the enumerated support."""
    return run_engine(engine, spec, data, D_obs, mech, G, 0, alpha, tie_rule,
                      mode="exhaustive", cap=cap, **kw)


def crt(spec: StatisticSpec, data, D_obs, event: ConditioningEvent, G, R: int = 1000,
        alpha: float = 0.05, tie_rule="count_as_ge", *, seed: int = 0,
        mode: str = "monte_carlo", stream=()) -> TestResult:
    """Conditional randomization test inside a user-supplied event.

    The statistic only reads focal units; draws come from the event's
    focal assignments with their conditional probabilities.
    """
    tie = TieRule.of(tie_rule).rule
    data, d0 = _check_inputs(spec, data, D_obs, G, alpha)
    if event.focal_units.size != G.n:
        raise InputError("conditioning event does not match the network size")
    event.check(G, spec.eps_s)
    if not event.contains(d0):
        raise InputError("observed assignment is not one of the focal assignments")
    focal = event.focal_units
    thr = spec.thresholds

    def values(codes):
        keep = np.broadcast_to(focal, codes.shape) & (codes >= SPILLOVER)
        return batch_values(spec, data, keep, keep & (codes == SPILLOVER), keep & (codes == CONTROL))[0]

    t_obs = float(values(G.interval_codes(d0, thr)[None, :])[0])
    if mode == "exhaustive":
        B, p = event.focal_assignments, event.pool.probs
        T = values(G.interval_codes(B, thr))
        ge, ties = compare(T, t_obs)
        n_ge, n_tie = _wsum(p, ge), _wsum(p, ties)
        pval = n_ge - 0.5 * n_tie if tie != "count_as_ge" else n_ge
        return TestResult("crt", float(pval), B.shape[0], n_ge, n_tie, _decide(pval, alpha), alpha,
                          alpha, "exhaustive", tie, draws=(T, np.full(T.shape, t_obs)),
                          diagnostics={"T_obs": _finite_or_str(t_obs)})
    if mode != "monte_carlo":
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    sizes = block_sizes(int(R))
    Ts, us = [], []
    for b, size in enumerate(sizes):
        _, idx, rng = draw_block(event.pool, seed, b, size, stream)
        Ts.append(values(G.pool_codes(event.pool.assignments, thr)[idx]))
        us.append(rng.random(size) < 0.5)
    T = np.concatenate(Ts)
    ge, ties = compare(T, t_obs)
    n_tie = int(ties.sum())
    if tie == "uniform_break":
        n_ge = float(((ge & ~ties) | (ties & np.concatenate(us))).sum())
        pval = (1 + n_ge) / (1 + R)
    else:
        n_ge = float(ge.sum())
        pval = (1 + n_ge - (0.5 * n_tie if tie == "half_discount" else 0.0)) / (1 + R)
    return TestResult("crt", float(pval), int(R), n_ge, float(n_tie), _decide(pval, alpha), alpha,
                      alpha, "monte_carlo", tie,
                      draws=(T, np.full(T.shape, t_obs)) if R <= STORE_LIMIT else None,
                      diagnostics={"T_obs": _finite_or_str(t_obs)})
