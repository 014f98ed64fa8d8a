"""Proximity structures and distance-interval queries.

A proximity structure holds symmetric, nonnegative distances among ``n`` units.
Three sources are supported:

- :class:`DenseProximity` -- an explicit ``n x n`` matrix (``inf`` = disconnected)
- :class:`CoordinateProximity` -- planar coordinates plus a Minkowski metric
- :class:`MembershipTable` -- precomputed interval labels for a finite pool of
  assignments (no raw distances available)

Every query reduces to the *exposure* of a unit under an assignment ``d``: the
minimum distance from the unit to any treated unit (``inf`` when nothing is
treated). Unit ``i`` is outside every ball of radius ``eps`` around the treated
units iff ``exposure[i] > eps``; intervals are half-open ``(a, b]``.

Unit sets are returned as boolean masks of length ``n``.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .design import as_assignment, as_assignment_matrix
from .errors import FormatError, InputError, UnknownAssignment, UnsupportedOperation

__all__ = [
    "ProximityStructure",
    "DenseProximity",
    "CoordinateProximity",
    "MembershipTable",
    "DistanceThresholds",
    "exposure_profile",
    "imputable_set",
    "interval_members",
    "interval_labels",
    "load_distance_csv",
    "load_coordinates_csv",
    "load_membership_table",
    "export_membership_table",
    "load_network",
]

_METRICS = {"euclidean": 2.0, "manhattan": 1.0, "cityblock": 1.0, "chebyshev": np.inf}
DENSE_CACHE_MAX = 2000  # coordinate networks up to this size keep a pairwise matrix


class DistanceThresholds:
    """Strictly increasing grid ``eps_0 < eps_1 < ... < eps_K`` with ``K >= 1``."""

    def __init__(self, grid: Sequence[float]):
        g = np.asarray(grid, dtype=float)
        if g.ndim != 1 or g.size < 2:
            raise InputError("threshold grid needs at least two entries (K >= 1)")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise InputError("thresholds must be finite and nonnegative")
        if np.any(np.diff(g) <= 0):
            raise InputError("thresholds must be strictly increasing")
        self.grid = g

    @property
    def K(self) -> int:
        return self.grid.size - 1

    def __getitem__(self, k):
        return float(self.grid[k])

    def __len__(self):
        return self.grid.size

    def __iter__(self):
        return iter(float(x) for x in self.grid)

    def __repr__(self):
        return f"DistanceThresholds({self.grid.tolist()})"


class ProximityStructure:
    """Common query surface. Subclasses provide :meth:`exposures` or override
    :meth:`interval_codes` directly."""

    n: int
    ids: tuple

    def __init__(self, n: int, ids=None):
        self.n = int(n)
        if ids is None:
            ids = [str(i) for i in range(self.n)]
        ids = tuple(str(i) for i in ids)
        if len(ids) != self.n:
            raise InputError(f"expected {self.n} unit ids, got {len(ids)}")
        if len(set(ids)) != self.n:
            raise InputError("unit ids must be unique")
        self.ids = ids
        self._codes_cache: dict = {}

    # -- exposure ---------------------------------------------------------
    def exposures(self, bits) -> np.ndarray:
        """Exposure rows for an ``(R, n)`` batch of assignments."""
        raise UnsupportedOperation(
            f"{type(self).__name__} cannot compute exposures; only interval queries"
        )

    def exposure(self, d) -> np.ndarray:
        d = as_assignment(d, self.n)
        return self.exposures(d[None, :])[0]

    @property
    def isolated(self) -> np.ndarray:
        """Units at infinite distance from every other unit."""
        return np.zeros(self.n, dtype=bool)

    # -- interval codes ---------------------------------------------------
    def interval_codes(self, bits, thresholds) -> np.ndarray:
        """Number of thresholds strictly below each unit's exposure.

        With thresholds ``(a, b)`` the codes are 0 for exposure <= a, 1 for
        ``(a, b]`` and 2 for exposure > b. Accepts one assignment or a batch.
        """
        single = np.ndim(bits) == 1
        B = as_assignment_matrix(bits, self.n)
        thr = _check_thresholds(thresholds)
        E = self.exposures(B)
        codes = np.searchsorted(thr, E, side="left").astype(np.int8)
        return codes[0] if single else codes

    def pool_codes(self, pool_bits: np.ndarray, thresholds) -> np.ndarray:
        """Codes for every row of a fixed pool, memoised per (pool, thresholds)."""
        key = (id(pool_bits), tuple(float(t) for t in thresholds))
        hit = self._codes_cache.get(key)
        if hit is not None and hit[0] is pool_bits:
            return hit[1]
        codes = self.interval_codes(pool_bits, thresholds)
        codes.setflags(write=False)
        if len(self._codes_cache) > 64:
            self._codes_cache.clear()
        self._codes_cache[key] = (pool_bits, codes)
        return codes

    def index_of(self, unit_id) -> int:
        try:
            return self.ids.index(str(unit_id))
        except ValueError:
            raise InputError(f"unknown unit id {unit_id!r}") from None


def _check_thresholds(thresholds) -> np.ndarray:
    thr = np.asarray(thresholds, dtype=float).ravel()
    if np.any(np.isnan(thr)):
        raise InputError("thresholds may not be NaN")
    if np.any(np.diff(thr) <= 0):
        raise InputError("interval bounds must be strictly increasing (a < b)")
    return thr


class DenseProximity(ProximityStructure):
    """Explicit distance matrix; ``inf`` marks disconnected pairs."""

    def __init__(self, matrix, ids=None):
        G = np.array(matrix, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise InputError(f"distance matrix must be square, got shape {G.shape}")
        if np.any(np.isnan(G)):
            raise InputError("distance matrix contains NaN")
        if np.any(np.diag(G) != 0):
            raise InputError("distance matrix diagonal must be zero")
        off = ~np.eye(G.shape[0], dtype=bool)
        if np.any(G[off] <= 0):
            i, j = np.argwhere((G <= 0) & off)[0]
            raise InputError(f"off-diagonal distance G[{i},{j}] must be > 0")
        if not np.array_equal(G, G.T):
            i, j = np.argwhere(G != G.T)[0]
            raise InputError(f"distance matrix is not symmetric at ({i},{j})")
        super().__init__(G.shape[0], ids)
        G.setflags(write=False)
        self.matrix = G

    def exposures(self, bits) -> np.ndarray:
        B = as_assignment_matrix(bits, self.n)
        out = np.full(B.shape, np.inf)
        for r, row in enumerate(B):
            idx = np.flatnonzero(row)
            if idx.size:
                out[r] = self.matrix[:, idx].min(axis=1)
        return out

    @property
    def isolated(self) -> np.ndarray:
        G = self.matrix.copy()
        np.fill_diagonal(G, np.inf)
        return np.all(np.isinf(G), axis=1)

    def to_dense(self) -> "DenseProximity":
        return self


class CoordinateProximity(ProximityStructure):
    """Points in the plane (or any dimension) with a Minkowski metric.

    Coincident points are allowed; they are at distance zero from each other.
    Exposure queries use a KD-tree over the treated points.
    """

    def __init__(self, coords, ids=None, metric: str = "euclidean"):
        X = np.array(coords, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InputError("coordinates must be an (n, dim) array")
        if not np.all(np.isfinite(X)):
            raise InputError("coordinates must be finite")
        if metric not in _METRICS:
            raise InputError(f"unknown metric {metric!r}; choose from {sorted(_METRICS)}")
        super().__init__(X.shape[0], ids)
        X.setflags(write=False)
        self.coords = X
        self.metric = metric
        self._p = _METRICS[metric]

    def exposures(self, bits) -> np.ndarray:
        B = as_assignment_matrix(bits, self.n)
        out = np.full(B.shape, np.inf)
        D = self._dense_cache()
        for r, row in enumerate(B):
            idx = np.flatnonzero(row)
            if not idx.size:
                continue
            if D is not None:
                out[r] = D[:, idx].min(axis=1)
            else:
                out[r] = cKDTree(self.coords[idx]).query(self.coords, p=self._p)[0]
        return out

    def _dense_cache(self):
        # small networks: one pairwise matrix beats a KD-tree per draw
        if self.n > DENSE_CACHE_MAX:
            return None
        D = getattr(self, "_D", None)
        if D is None:
            D = self._pairwise()
            D.setflags(write=False)
            self._D = D
        return D

    def _pairwise(self) -> np.ndarray:
        if np.isinf(self._p):
            return cdist(self.coords, self.coords, metric="chebyshev")
        return cdist(self.coords, self.coords, metric="minkowski", p=self._p)

    def to_dense(self) -> DenseProximity:
        return DenseProximity(self._pairwise(), self.ids)


# -- interval labels --------------------------------------------------------

def _fmt(x: float) -> str:
    if np.isinf(x):
        return "inf"
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def interval_labels(grid: Sequence[float]) -> list[str]:
    """Label strings for a grid: ``[0,g0]``, ``(g0,g1]``, ..., ``(gK,inf)``."""
    g = [float(x) for x in grid]
    labels = [f"[0,{_fmt(g[0])}]"]
    labels += [f"({_fmt(a)},{_fmt(b)}]" for a, b in zip(g[:-1], g[1:])]
    labels.append(f"({_fmt(g[-1])},inf)")
    return labels


_LABEL_RE = re.compile(r"^\s*([\[(])\s*([^,\s]+)\s*,\s*([^\])\s]+)\s*([\])])\s*$")


def _parse_bound(tok: str) -> float:
    tok = tok.strip().lower()
    if tok in {"inf", "+inf", "infinity", "∞"}:
        return np.inf
    return float(tok)


def _label_index(label: str, grid: np.ndarray) -> int:
    m = _LABEL_RE.match(label)
    if not m:
        raise ValueError(f"malformed interval label {label!r}")
    lo_br, lo, hi, _ = m.groups()
    lo, hi = _parse_bound(lo), _parse_bound(hi)
    if lo_br == "[":
        if lo == 0 and hi == grid[0]:
            return 0
    else:
        if np.isinf(hi):
            if lo == grid[-1]:
                return grid.size
        else:
            for k in range(1, grid.size):
                if lo == grid[k - 1] and hi == grid[k]:
                    return k
    raise ValueError(f"label {label!r} does not match the declared grid {grid.tolist()}")


class MembershipTable(ProximityStructure):
    """Per-assignment interval labels for a finite pool.

    Parameters
    ----------
    grid : increasing thresholds ``g_0 < ... < g_K``
    labels : mapping assignment id -> int array of label indices, where 0 means
        exposure in ``[0, g_0]``, ``k`` means ``(g_{k-1}, g_k]`` and ``K+1`` means
        ``(g_K, inf)``
    treated : mapping assignment id -> boolean treatment vector
    """

    def __init__(self, grid, labels: dict, treated: dict, ids=None):
        g = np.asarray(grid, dtype=float)
        if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) <= 0) or np.any(g < 0):
            raise InputError("membership grid must be increasing and nonnegative")
        if not labels:
            raise InputError("membership table declares no assignments")
        n = len(next(iter(labels.values())))
        super().__init__(n, ids)
        self.grid = g
        self.labels = {}
        for aid, lab in labels.items():
            lab = np.asarray(lab, dtype=np.int8)
            if lab.shape != (n,) or lab.min() < 0 or lab.max() > g.size:
                raise InputError(f"bad label vector for assignment {aid!r}")
            self.labels[str(aid)] = lab
        self.treated = {}
        self._by_bits = {}
        for aid in self.labels:
            if aid not in treated:
                raise InputError(f"assignment {aid!r} has no treatment vector")
            bits = as_assignment(treated[aid], n)
            self.treated[aid] = bits
            self._by_bits.setdefault(np.packbits(bits).tobytes(), aid)

    @property
    def assignment_ids(self) -> list[str]:
        return list(self.labels)

    def pool_matrix(self) -> np.ndarray:
        """Treatment vectors of the pool, in declaration order."""
        return np.stack([self.treated[a] for a in self.labels])

    def resolve(self, d) -> str:
        if isinstance(d, str):
            if d not in self.labels:
                raise UnknownAssignment(f"assignment {d!r} is not in the membership pool")
            return d
        bits = as_assignment(d, self.n)
        aid = self._by_bits.get(np.packbits(bits).tobytes())
        if aid is None:
            treated = [self.ids[i] for i in np.flatnonzero(bits)]
            raise UnknownAssignment(
                f"assignment with treated units {treated} is not in the membership pool"
            )
        return aid

    def _cutoff(self, t: float) -> int:
        if t < 0:
            return 0
        if np.isinf(t):
            return self.grid.size + 2
        hit = np.flatnonzero(self.grid == t)
        if hit.size == 0:
            raise InputError(
                f"threshold {t} is not on the membership grid {self.grid.tolist()}; "
                "only grid points, negative values and inf can be resolved"
            )
        return int(hit[0]) + 1

    def interval_codes(self, bits, thresholds) -> np.ndarray:
        thr = _check_thresholds(thresholds)
        cut = np.array([self._cutoff(t) for t in thr])
        if isinstance(bits, str):
            lab = self.labels[self.resolve(bits)]
            return (lab[:, None] >= cut[None, :]).sum(axis=1).astype(np.int8)
        single = np.ndim(bits) == 1
        B = as_assignment_matrix(bits, self.n)
        lab = np.stack([self.labels[self.resolve(row)] for row in B])
        codes = (lab[..., None] >= cut).sum(axis=-1).astype(np.int8)
        return codes[0] if single else codes


# -- queries ----------------------------------------------------------------

def exposure_profile(G: ProximityStructure, d) -> np.ndarray:
    """Minimum distance from each unit to the treated set (``inf`` if none)."""
    return G.exposure(d)


def imputable_set(G: ProximityStructure, d, eps_s: float) -> np.ndarray:
    """Units with no treated unit within ``eps_s``: exposure > eps_s.

    A negative ``eps_s`` encodes the sharp null and returns every unit.
    """
    return G.interval_codes(d, [eps_s]) >= 1


def interval_members(G: ProximityStructure, d, a: float, b: float) -> np.ndarray:
    """Units whose exposure lies in ``(a, b]`` (``(a, inf)`` when ``b = inf``)."""
    if not a < b:
        raise InputError(f"interval lower bound must be below upper bound, got ({a}, {b}]")
    if np.isinf(b):
        return G.interval_codes(d, [a]) >= 1
    return G.interval_codes(d, [a, b]) == 1


# -- file formats -----------------------------------------------------------

def _parse_float(tok: str, path, line) -> float:
    try:
        return _parse_bound(tok)
    except ValueError:
        raise FormatError(f"not a number: {tok!r}", line=line, path=path) from None


def load_distance_csv(path) -> DenseProximity:
    """Dense matrix CSV. The first row is a header of unit ids if it is not numeric."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if any(c.strip() for c in r)]
    if not rows:
        raise FormatError("empty distance file", path=path)
    ids = None
    first = rows[0][1]
    try:
        [_parse_bound(c) for c in first]
    except ValueError:
        ids = [c.strip() for c in first]
        rows = rows[1:]
    n = len(rows)
    M = np.empty((n, n))
    for r, (line, row) in enumerate(rows):
        if len(row) != n:
            raise FormatError(f"expected {n} columns, found {len(row)}", line=line, path=path)
        M[r] = [_parse_float(c, path, line) for c in row]
    if ids is not None and len(ids) != n:
        raise FormatError(f"header lists {len(ids)} ids for {n} rows", line=1, path=path)
    try:
        return DenseProximity(M, ids)
    except InputError as exc:
        raise FormatError(str(exc), path=path) from None


def load_coordinates_csv(path, metric: str = "euclidean") -> CoordinateProximity:
    """Coordinates CSV with header ``id,x,y``."""
    path = Path(path)
    ids, pts = [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "x", "y"} - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"missing columns {sorted(missing)}", line=1, path=path)
        for row in reader:
            line = reader.line_num
            ids.append(row["id"].strip())
            pts.append((_parse_float(row["x"], path, line), _parse_float(row["y"], path, line)))
    if not ids:
        raise FormatError("no coordinate rows", path=path)
    try:
        return CoordinateProximity(np.array(pts), ids, metric=metric)
    except InputError as exc:
        raise FormatError(str(exc), path=path) from None


def load_membership_table(path, sidecar=None) -> MembershipTable:
    """Membership CSV (``assignment_id,unit_id,interval_label``) plus JSON sidecar.

    The sidecar declares ``grid`` and ``assignments`` (id -> list of treated unit
    ids, or ``null`` when the treated set can be read off the ``[0,0]`` label),
    and optionally ``units`` to fix the unit order.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise FormatError("membership sidecar not found", path=sidecar) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=sidecar) from None
    for key in ("grid", "assignments"):
        if key not in meta:
            raise FormatError(f"sidecar is missing {key!r}", path=sidecar)
    grid = np.asarray(meta["grid"], dtype=float)
    pool = {str(k): v for k, v in meta["assignments"].items()}

    entries: dict[str, dict[str, int]] = {a: {} for a in pool}
    seen_units: list[str] = []
    seen_set = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"assignment_id", "unit_id", "interval_label"} - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"missing columns {sorted(missing)}", line=1, path=path)
        for row in reader:
            line = reader.line_num
            aid, uid = row["assignment_id"].strip(), row["unit_id"].strip()
            if aid not in entries:
                raise FormatError(f"assignment {aid!r} is not declared in the sidecar pool",
                                  line=line, path=path)
            try:
                lab = _label_index(row["interval_label"], grid)
            except ValueError as exc:
                raise FormatError(str(exc), line=line, path=path) from None
            if uid in entries[aid]:
                raise FormatError(f"duplicate row for ({aid}, {uid})", line=line, path=path)
            entries[aid][uid] = lab
            if uid not in seen_set:
                seen_set.add(uid)
                seen_units.append(uid)

    units = [str(u) for u in meta.get("units", seen_units)]
    if set(units) != seen_set:
        raise FormatError("unit list in sidecar does not match the table", path=sidecar)
    labels, treated = {}, {}
    for aid, per_unit in entries.items():
        if len(per_unit) != len(units):
            raise FormatError(
                f"assignment {aid!r} labels {len(per_unit)} of {len(units)} units", path=path
            )
        lab = np.array([per_unit[u] for u in units], dtype=np.int8)
        declared = pool[aid]
        if declared is None:
            if grid[0] != 0:
                raise FormatError(
                    f"assignment {aid!r} has no treated list and grid[0] != 0", path=sidecar
                )
            bits = lab == 0
        else:
            bits = np.zeros(len(units), dtype=bool)
            for u in declared:
                if str(u) not in per_unit:
                    raise FormatError(f"treated unit {u!r} of {aid!r} is unknown", path=sidecar)
                bits[units.index(str(u))] = True
            if np.any(lab[bits] != 0):
                raise FormatError(
                    f"treated units of {aid!r} must carry the [0,{_fmt(grid[0])}] label", path=path
                )
        labels[aid], treated[aid] = lab, bits
    return MembershipTable(grid, labels, treated, ids=units)


def export_membership_table(G: ProximityStructure, pool, grid, path, sidecar=None,
                            assignment_ids=None) -> None:
    """Write the labels of every pooled assignment in the membership format."""
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_suffix(".json")
    pool = as_assignment_matrix(pool, G.n)
    grid = [float(x) for x in grid]
    if assignment_ids is None:
        assignment_ids = [f"a{r}" for r in range(pool.shape[0])]
    names = interval_labels(grid)
    codes = G.interval_codes(pool, grid)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["assignment_id", "unit_id", "interval_label"])
        for aid, row in zip(assignment_ids, codes):
            for uid, c in zip(G.ids, row):
                w.writerow([aid, uid, names[c]])
    meta = {
        "grid": grid,
        "units": list(G.ids),
        "assignments": {
            aid: [G.ids[i] for i in np.flatnonzero(bits)]
            for aid, bits in zip(assignment_ids, pool)
        },
    }
    sidecar.write_text(json.dumps(meta, indent=2))


def load_network(path, fmt: str = "dense", **kw) -> ProximityStructure:
    if fmt == "dense":
        return load_distance_csv(path)
    if fmt == "coordinates":
        return load_coordinates_csv(path, metric=kw.get("metric", "euclidean"))
    if fmt == "membership":
        return load_membership_table(path, kw.get("sidecar"))
    raise InputError(f"unknown network format {fmt!r}")
