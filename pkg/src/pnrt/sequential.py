"""Sequential tests over a distance grid.

``sequential_test`` walks up the grid and stops at the first non-rejection,
which controls the family-wise error rate because the hypotheses are nested.
``two_step_pretest`` uses the located boundary to pick the pure-control
distance for a follow-up test. ``pure_control_descent`` is the unadjusted
top-down selection rule kept for comparison only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engines import TestResult, pnrt_min, pnrt_pair
from .errors import InputError
from .network import DistanceThresholds
from .stats import CONTROL, SPILLOVER, StatisticSpec

THIN_GROUP = 20
ENGINE_FUNCS = {"pair": pnrt_pair, "min": pnrt_min}


@dataclass(frozen=True)
class EngineConfig:
    """Engine choice plus everything except the thresholds, which vary with k."""

    engine: str = "pair"
    statistic: StatisticSpec = field(default_factory=lambda: StatisticSpec(eps_s=0.0, eps_c=1.0))
    R: int = 1000
    tie_rule: str = "count_as_ge"
    seed: int = 0
    mode: str = "monte_carlo"
    unadjusted: bool = False
    workers: int = 1
    min_mode: str = "sampled"

    def __post_init__(self):
        if self.engine not in ENGINE_FUNCS:
            raise InputError(f"sequential engine must be one of {sorted(ENGINE_FUNCS)}, got {self.engine!r}")

    def run(self, data, D_obs, mech, G, eps_s, eps_c, alpha) -> TestResult:
        spec = self.statistic.with_thresholds(eps_s, eps_c)
        return ENGINE_FUNCS[self.engine](
            spec, data, D_obs, mech, G, self.R, alpha, self.tie_rule, seed=self.seed,
            mode=self.mode, unadjusted=self.unadjusted, workers=self.workers,
            min_mode=self.min_mode,
        )

    def to_dict(self) -> dict:
        return {
            "engine": self.engine,
            "statistic": self.statistic.to_dict(),
            "R": self.R,
            "tie_rule": self.tie_rule,
            "seed": self.seed,
            "mode": self.mode,
            "unadjusted": self.unadjusted,
            "min_mode": self.min_mode,
        }


@dataclass
class SequentialResult:
    K_hat: int
    boundary_distance: Optional[float]
    pvals: list
    per_k_details: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    tested: list = field(default_factory=list)
    stopped_on_no_decision: bool = False
    procedure: str = "sequential"

    def summary(self) -> str:
        if self.stopped_on_no_decision:
            k = self.tested[-1]
            return f"stopped at k={k}: no decision possible (no imputable units)"
        if self.procedure == "descent":
            return f"pure control distance {self.boundary_distance:g} (K_hat={self.K_hat})"
        if self.K_hat == 0:
            return "no significant interference"
        return (f"significant spillover up to distance {self.boundary_distance:g} "
                f"(K_hat={self.K_hat})")

    def to_dict(self) -> dict:
        return {
            "procedure": self.procedure,
            "K_hat": self.K_hat,
            "boundary_distance": self.boundary_distance,
            "tested": list(self.tested),
            "pvals": list(self.pvals),
            "stopped_on_no_decision": self.stopped_on_no_decision,
            "summary": self.summary(),
            "warnings": list(self.warnings),
            "per_k": [r.to_dict() for r in self.per_k_details],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [self.summary(), "", "k  p-value   decision"]
        for k, r in zip(self.tested, self.per_k_details):
            lines.append(f"{k:<2} {r.pval:<9.4g} {r.decision}")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def run_sequence(test_at: Callable[[int], TestResult], K: int):
    """Bottom-up loop: test k = 0, 1, ... and stop at the first non-rejection.

    Returns ``(K_hat, results, no_decision)``. ``test_at`` is called once per
    tested index and never past the stopping point.
    """
    results = []
    for k in range(K):
        r = test_at(k)
        results.append(r)
        if r.no_decision:
            return k, results, True
        if not r.rejected:
            return k, results, False
    return K, results, False


def _thin_groups(G, D_obs, grid, ks) -> list:
    out = []
    for k in ks:
        codes = G.interval_codes(D_obs, (grid[k], grid[k + 1]))
        ns, nc = int((codes == SPILLOVER).sum()), int((codes == CONTROL).sum())
        for lab, cnt in ((f"({grid[k]:g}, {grid[k + 1]:g}]", ns), (f"({grid[k + 1]:g}, inf)", nc)):
            if cnt < THIN_GROUP:
                out.append(f"k={k}: interval {lab} holds only {cnt} units under the observed "
                           f"assignment (power is likely trivial below {THIN_GROUP})")
    return out


def _grid(thresholds) -> DistanceThresholds:
    return thresholds if isinstance(thresholds, DistanceThresholds) else DistanceThresholds(thresholds)


def sequential_test(cfg: EngineConfig, data, D_obs, mech, G, thresholds, alpha: float = 0.05
                    ) -> SequentialResult:
    """Test the nested nulls at k = 0..K-1, each with eps_c = eps_{k+1}."""
    grid = _grid(thresholds)
    D_obs = np.asarray(D_obs)

    def test_at(k):
        return cfg.run(data, D_obs, mech, G, grid[k], grid[k + 1], alpha)

    K_hat, results, nd = run_sequence(test_at, grid.K)
    tested = list(range(len(results)))
    return SequentialResult(
        K_hat=K_hat,
        boundary_distance=grid[K_hat],
        pvals=[r.pval for r in results],
        per_k_details=results,
        warnings=_thin_groups(G, D_obs, grid, tested),
        tested=tested,
        stopped_on_no_decision=nd,
    )


def two_step_pretest(cfg: EngineConfig, data, D_obs, mech, G, thresholds, alpha: float = 0.05,
                     k_target: int = 0, first_step: Optional[SequentialResult] = None) -> TestResult:
    """Locate the boundary, then test level ``k_target`` against eps_{K_hat} controls.

    When the first step did not get past ``k_target`` the follow-up test is
    skipped and a non-rejection with p-value 1 is returned.
    """
    grid = _grid(thresholds)
    if not 0 <= k_target < grid.K:
        raise InputError(f"k_target must lie in 0..{grid.K - 1}, got {k_target}")
    step1 = first_step or sequential_test(cfg, data, D_obs, mech, G, grid, alpha)
    if step1.K_hat <= k_target:
        level = alpha / 2 if cfg.engine == "pair" and not cfg.unadjusted else alpha
        return TestResult(cfg.engine, 1.0, 0, 0.0, 0.0, "accept", alpha, level, cfg.mode,
                          cfg.tie_rule, warnings=[
                              f"first step stopped at K_hat={step1.K_hat} <= k_target={k_target}; "
                              "second test suppressed"],
                          diagnostics={"K_hat": step1.K_hat, "suppressed": True})
    res = cfg.run(data, D_obs, mech, G, grid[k_target], grid[step1.K_hat], alpha)
    res.diagnostics.update({"K_hat": step1.K_hat, "eps_c": grid[step1.K_hat], "suppressed": False})
    return res


def pure_control_descent(cfg: EngineConfig, data, D_obs, mech, G, thresholds,
                         alpha: float = 0.05) -> SequentialResult:
    """Top-down selection: k = K-1 .. 0, stop at the first rejection.

    No multiplicity adjustment; the chosen distance can overshoot.
    """
    grid = _grid(thresholds)
    D_obs = np.asarray(D_obs)
    K_hat = grid.K
    results, tested = [], []
    nd = False
    for k in range(grid.K - 1, -1, -1):
        r = cfg.run(data, D_obs, mech, G, grid[k], grid[k + 1], alpha)
        results.append(r)
        tested.append(k)
        if r.no_decision:
            nd = True
            break
        if r.rejected:
            break
        K_hat = k
    warnings = ["NOT FWER-ADJUSTED: top-down selection without multiplicity control"]
    warnings += _thin_groups(G, D_obs, grid, tested)
    return SequentialResult(K_hat, grid[K_hat], [r.pval for r in results], results, warnings,
                            tested, nd, procedure="descent")
