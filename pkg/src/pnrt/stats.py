"""Pairwise imputable statistics.

A statistic is evaluated for a pair of assignments: the *filter* assignment
decides which units are imputable, the *group* assignment decides who sits in
the spillover interval ``(eps_s, eps_c]`` and who is pure control
``(eps_c, inf)``. Only units imputable under both assignments are read, so the
value can be computed from observed outcomes under the partial null whichever
of the two assignments was observed.

Empty comparison groups (or a degenerate regression) yield ``inf``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .design import as_assignment, block_sizes, draw_block, enumerate_support
from .errors import FormatError, InputError

KINDS = ("diff_in_means", "rank_diff", "regression_coefficient")
SIDEDNESS = ("two_sided", "one_sided_upper")
WEIGHTING = ("none", "inverse_propensity")
RESIDUALS = ("none", "pairwise")
COND_LIMIT = 1e12

# codes produced by ProximityStructure.interval_codes with thresholds (eps_s, eps_c)
NOT_IMPUTABLE, SPILLOVER, CONTROL = 0, 1, 2


@dataclass(frozen=True, kw_only=True)
class StatisticSpec:
    """What to compute and on which distance intervals.

    ``covariates`` names columns of :attr:`OutcomeData.X` (``None`` = all
    columns); only the regression kind and the pairwise-residual variant use
    them. ``propensity`` holds ``(p_spill, p_ctrl)`` arrays from
    :func:`exposure_propensity` and is required for inverse-propensity weighting.
    """

    eps_c: float
    eps_s: float = 0.0
    kind: str = "diff_in_means"
    sidedness: str = "two_sided"
    covariates: Optional[tuple] = None
    weighting: str = "none"
    residuals: str = "none"
    propensity: Optional[tuple] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"statistic kind must be one of {KINDS}, got {self.kind!r}")
        if self.sidedness not in SIDEDNESS:
            raise InputError(f"sidedness must be one of {SIDEDNESS}, got {self.sidedness!r}")
        if self.weighting not in WEIGHTING:
            raise InputError(f"weighting must be one of {WEIGHTING}, got {self.weighting!r}")
        if self.residuals not in RESIDUALS:
            raise InputError(f"residuals must be one of {RESIDUALS}, got {self.residuals!r}")
        if not float(self.eps_s) < float(self.eps_c):
            raise InputError(f"need eps_s < eps_c, got {self.eps_s} and {self.eps_c}")
        if self.weighting == "inverse_propensity":
            if self.kind != "regression_coefficient":
                raise InputError("inverse-propensity weighting applies to the regression kind")
            if self.propensity is None:
                raise InputError("inverse-propensity weighting needs spec.propensity")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def thresholds(self) -> tuple:
        return (float(self.eps_s), float(self.eps_c))

    @property
    def sharp(self) -> bool:
        return self.eps_s < 0

    def with_thresholds(self, eps_s, eps_c) -> "StatisticSpec":
        return replace(self, eps_s=eps_s, eps_c=eps_c)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sidedness": self.sidedness,
            "eps_s": _jsonable(self.eps_s),
            "eps_c": _jsonable(self.eps_c),
            "covariates": None if self.covariates is None else list(self.covariates),
            "weighting": self.weighting,
            "residuals": self.residuals,
        }


def _jsonable(x):
    x = float(x)
    return "inf" if np.isinf(x) else x


@dataclass
class OutcomeData:
    """Observed outcomes ``y`` and an optional ``(n, p)`` covariate matrix."""

    y: np.ndarray
    X: Optional[np.ndarray] = None
    covariate_names: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 1:
            raise InputError("outcomes must be a 1-d vector")
        if not np.all(np.isfinite(self.y)):
            raise InputError("outcomes must be finite")
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape[0] != self.y.size:
                raise InputError("covariate rows do not align with outcomes")
            if not np.all(np.isfinite(X)):
                raise InputError("covariates must be finite")
            self.X = X
            names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(X.shape[1]))
            if len(names) != X.shape[1]:
                raise InputError("covariate_names does not match the number of columns")
            self.covariate_names = names
        else:
            self.covariate_names = ()

    @property
    def n(self) -> int:
        return self.y.size

    def columns(self, names) -> np.ndarray:
        """Covariate matrix for ``names`` (``None`` = every column)."""
        if self.X is None:
            if names:
                raise InputError(f"covariates {list(names)} requested but no covariates loaded")
            return np.empty((self.n, 0))
        if names is None:
            return self.X
        idx = []
        for nm in names:
            if isinstance(nm, (int, np.integer)):
                idx.append(int(nm))
            elif nm in self.covariate_names:
                idx.append(self.covariate_names.index(nm))
            else:
                raise InputError(f"unknown covariate {nm!r}")
        return self.X[:, idx]

    def with_outcomes(self, y) -> "OutcomeData":
        return OutcomeData(y, self.X, self.covariate_names)


def load_outcomes_csv(path, unit_ids: Optional[Sequence[str]] = None) -> OutcomeData:
    """Outcome CSV ``unit_id,y,<covariates...>`` aligned to ``unit_ids`` order."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = list(reader.fieldnames or [])
        if "unit_id" not in cols or "y" not in cols:
            raise FormatError("outcome file needs columns unit_id,y", line=1, path=path)
        cov = [c for c in cols if c not in ("unit_id", "y")]
        rows = {}
        for row in reader:
            line = reader.line_num
            uid = row["unit_id"].strip()
            if uid in rows:
                raise FormatError(f"duplicate unit {uid!r}", line=line, path=path)
            try:
                vals = [float(row["y"])] + [float(row[c]) for c in cov]
            except (TypeError, ValueError):
                raise FormatError("non-numeric outcome or covariate", line=line, path=path) from None
            if not np.all(np.isfinite(vals)):
                raise FormatError("outcomes and covariates must be finite", line=line, path=path)
            rows[uid] = vals
    order = list(rows) if unit_ids is None else [str(u) for u in unit_ids]
    missing = [u for u in order if u not in rows]
    if missing:
        raise FormatError(f"no outcome for units {missing[:5]}", path=path)
    M = np.array([rows[u] for u in order], dtype=float).reshape(len(order), 1 + len(cov))
    X = M[:, 1:] if cov else None
    return OutcomeData(M[:, 0], X, tuple(cov))


# -- single evaluation ------------------------------------------------------

def _finish(v: float, spec: StatisticSpec) -> float:
    return abs(v) if spec.sidedness == "two_sided" else v


def _ipw_weights(spec: StatisticSpec, spill, ctrl):
    p_s, p_c = (np.asarray(a, dtype=float) for a in spec.propensity)
    with np.errstate(divide="ignore"):
        w = np.where(spill, 1.0 / p_s, np.where(ctrl, 1.0 / p_c, 0.0))
    bad = ~np.isfinite(w)
    w[bad] = 0.0
    return w, bool(np.any(bad & (spill | ctrl)))


def _wls(A, y, w=None):
    """Weighted least squares; returns (coef, ok)."""
    if w is not None:
        sw = np.sqrt(w)
        A = A * sw[:, None]
        y = y * sw
    if A.shape[0] < A.shape[1]:
        return None, False
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] == 0 or s[0] / s[-1] > COND_LIMIT:
        return None, False
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef, True


def _row_value(spec: StatisticSpec, data: OutcomeData, keep, spill, ctrl):
    """Statistic for one (keep, spill, ctrl) triple; returns (value, flagged)."""
    y = data.y
    ns, nc = int(spill.sum()), int(ctrl.sum())
    if ns == 0 or nc == 0:
        return np.inf, False
    if spec.residuals == "pairwise":
        Xc = data.columns(spec.covariates)
        A = np.column_stack([np.ones(int(keep.sum())), Xc[keep]])
        coef, ok = _wls(A, y[keep])
        if not ok:
            return np.inf, True
        y = y.copy()
        y[keep] = y[keep] - A @ coef
        data = data.with_outcomes(y)
        inner = replace(spec, residuals="none", covariates=())
        return _row_value(inner, data, keep, spill, ctrl)
    if spec.kind == "diff_in_means":
        v = y[spill].mean() - y[ctrl].mean()
        return _finish(v, spec), False
    if spec.kind == "rank_diff":
        yk = y[keep]
        less = (yk[None, :] < yk[:, None]).sum(axis=1)
        eq = (yk[None, :] == yk[:, None]).sum(axis=1)
        r = np.zeros_like(y)
        r[keep] = less + 0.5 * (1 + eq) - (1 + yk.size) / 2
        v = r[spill].mean() - r[ctrl].mean()
        return _finish(v, spec), False
    rows = spill | ctrl
    Xc = data.columns(spec.covariates)[rows]
    A = np.column_stack([np.ones(int(rows.sum())), spill[rows].astype(float), Xc])
    w, flagged = None, False
    if spec.weighting == "inverse_propensity":
        w, flagged = _ipw_weights(spec, spill, ctrl)
        w = w[rows]
    coef, ok = _wls(A, y[rows], w)
    if not ok:
        return np.inf, True
    return _finish(float(coef[1]), spec), flagged


def _masks(codes_filter, codes_group):
    keep = (codes_filter >= SPILLOVER) & (codes_group >= SPILLOVER)
    return keep, keep & (codes_group == SPILLOVER), keep & (codes_group == CONTROL)


def evaluate(spec: StatisticSpec, data: OutcomeData, filter_assignment, group_assignment,
             G) -> float:
    """Statistic restricted to units imputable under both assignments.

    Units are grouped by their distance interval under ``group_assignment``;
    returns ``inf`` when a group is empty or the regression is degenerate.
    """
    f = as_assignment(filter_assignment, G.n)
    g = as_assignment(group_assignment, G.n)
    if data.n != G.n:
        raise InputError(f"{data.n} outcomes for {G.n} units")
    cf = G.interval_codes(f, spec.thresholds)
    cg = G.interval_codes(g, spec.thresholds)
    return float(_row_value(spec, data, *_masks(cf, cg))[0])


def pairwise_residual_evaluate(spec: StatisticSpec, data: OutcomeData, filter_assignment,
                               group_assignment, G) -> float:
    """Refit ``y ~ 1 + covariates`` on the pair's imputable units, then evaluate
    the statistic on those residuals (regression kinds drop the covariates)."""
    return evaluate(replace(spec, residuals="pairwise"), data, filter_assignment,
                    group_assignment, G)


def residualize(data: OutcomeData, covariates=None) -> OutcomeData:
    """Replace outcomes by full-sample least-squares residuals on ``covariates``.

    The design is used as given (add a constant column for an intercept).
    """
    X = data.columns(covariates)
    if X.shape[1] == 0:
        raise InputError("residualize needs at least one covariate column")
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        names = list(data.covariate_names) if covariates is None else list(covariates)
        offending, kept = [], np.empty((X.shape[0], 0))
        for j in range(X.shape[1]):
            trial = np.column_stack([kept, X[:, j]])
            if np.linalg.matrix_rank(trial) > kept.shape[1]:
                kept = trial
            else:
                offending.append(names[j] if j < len(names) else j)
        raise InputError(f"covariate matrix is rank deficient; offending columns {offending}")
    coef, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    return OutcomeData(data.y - X @ coef, data.X, data.covariate_names)


# -- batched evaluation -----------------------------------------------------

def _masked_mean(M: np.ndarray, v: np.ndarray):
    cnt = M.sum(axis=1)
    tot = M.astype(float) @ v
    with np.errstate(invalid="ignore", divide="ignore"):
        return tot / cnt, cnt


def _batch_ranks(y: np.ndarray, keep: np.ndarray) -> np.ndarray:
    u, inv = np.unique(y, return_inverse=True)
    onehot = np.zeros((y.size, u.size))
    onehot[np.arange(y.size), inv] = 1.0
    cnt = keep.astype(float) @ onehot
    less = np.cumsum(cnt, axis=1) - cnt
    nk = keep.sum(axis=1)
    return less[:, inv] + 0.5 * (1.0 + cnt[:, inv]) - (1.0 + nk)[:, None] / 2.0


def batch_values(spec: StatisticSpec, data: OutcomeData, keep, spill, ctrl):
    """Vectorised statistic over rows of ``(R, n)`` masks.

    Returns ``(values, flagged)``; ``flagged`` marks degenerate regressions or
    zero estimated propensities.
    """
    keep, spill, ctrl = (np.atleast_2d(a) for a in (keep, spill, ctrl))
    R = keep.shape[0]
    flagged = np.zeros(R, dtype=bool)
    if spec.kind in ("diff_in_means", "rank_diff") and spec.residuals == "none":
        if spec.kind == "diff_in_means":
            ms, ns = _masked_mean(spill, data.y)
            mc, nc = _masked_mean(ctrl, data.y)
        else:
            ranks = _batch_ranks(data.y, keep)
            with np.errstate(invalid="ignore", divide="ignore"):
                ns, nc = spill.sum(axis=1), ctrl.sum(axis=1)
                ms = (ranks * spill).sum(axis=1) / ns
                mc = (ranks * ctrl).sum(axis=1) / nc
        v = ms - mc
        if spec.sidedness == "two_sided":
            v = np.abs(v)
        v[(ns == 0) | (nc == 0)] = np.inf
        return v, flagged
    out = np.empty(R)
    for r in range(R):
        out[r], flagged[r] = _row_value(spec, data, keep[r], spill[r], ctrl[r])
    return out, flagged


def pair_values(spec: StatisticSpec, data: OutcomeData, codes_obs, codes_draws):
    """Both orientations for each draw.

    ``T_r`` filters by the observed assignment and groups by draw ``r``;
    ``T_obs_r`` filters by draw ``r`` and groups by the observed assignment.
    Both read the same units ``I(obs) & I(draw_r)``.
    """
    cd = np.atleast_2d(codes_draws)
    co = np.broadcast_to(codes_obs, cd.shape)
    keep = (co >= SPILLOVER) & (cd >= SPILLOVER)
    T, f1 = batch_values(spec, data, keep, keep & (cd == SPILLOVER), keep & (cd == CONTROL))
    Tobs, f2 = batch_values(spec, data, keep, keep & (co == SPILLOVER), keep & (co == CONTROL))
    return T, Tobs, f1 | f2


def sharp_values(spec: StatisticSpec, data: OutcomeData, codes_draws):
    """Statistic with every unit imputable, grouped by each draw (FRT)."""
    cd = np.atleast_2d(codes_draws)
    keep = np.ones(cd.shape, dtype=bool)
    return batch_values(spec, data, keep, cd == SPILLOVER, cd == CONTROL)


# -- propensities -----------------------------------------------------------

def exposure_propensity(mech, G, eps_s: float, eps_c: float, R_prop: int = 1000,
                        seed: int = 0, exact: bool = False):
    """Per-unit probability of landing in ``(eps_s, eps_c]`` and in ``(eps_c, inf)``.

    Monte Carlo over ``R_prop`` draws by default; ``exact=True`` enumerates the
    support instead. Returns ``(p_spill, p_ctrl)``.
    """
    thr = (float(eps_s), float(eps_c))
    if exact:
        B, p = enumerate_support(mech)
        codes = G.interval_codes(B, thr)
        return p @ (codes == SPILLOVER), p @ (codes == CONTROL)
    spill = np.zeros(G.n)
    ctrl = np.zeros(G.n)
    for b, size in enumerate(block_sizes(R_prop)):
        bits, _, _ = draw_block(mech, seed, b, size, stream=(0x9E37,))
        codes = G.interval_codes(bits, thr)
        spill += (codes == SPILLOVER).sum(axis=0)
        ctrl += (codes == CONTROL).sum(axis=0)
    return spill / R_prop, ctrl / R_prop
