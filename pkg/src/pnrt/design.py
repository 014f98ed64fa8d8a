"""Known assignment mechanisms and reproducible draws from them.

Assignments are boolean numpy vectors of length ``n``. Every mechanism supports
``sample`` (one draw), ``sample_block`` (a batch) and ``enumerate_support``
(exact support with probabilities, for small designs).

Reproducibility: replicate ``r`` of a resampling run always comes from block
``r // BLOCK`` of a stream keyed by ``(seed, *stream, block)``, so the draws do
not depend on how blocks are spread over workers.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import FormatError, InputError, SupportTooLarge

BLOCK = 256
DEFAULT_CAP = 10**6


def as_assignment(d, n: Optional[int] = None) -> np.ndarray:
    a = np.asarray(d)
    if a.ndim != 1:
        raise InputError(f"assignment must be a 1-d vector, got shape {a.shape}")
    if a.dtype != bool:
        if a.size and not np.all((a == 0) | (a == 1)):
            raise InputError("assignment entries must be 0/1")
        a = a.astype(bool)
    if n is not None and a.size != n:
        raise InputError(f"assignment has length {a.size}, expected {n}")
    return a


def as_assignment_matrix(bits, n: int) -> np.ndarray:
    B = np.asarray(bits)
    if B.ndim == 1:
        B = B[None, :]
    if B.ndim != 2 or B.shape[1] != n:
        raise InputError(f"assignments must have {n} columns, got shape {B.shape}")
    if B.dtype != bool:
        if B.size and not np.all((B == 0) | (B == 1)):
            raise InputError("assignment entries must be 0/1")
        B = B.astype(bool)
    return B


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)`` (SeedSequence spawn keys)."""
    if seed is None or int(seed) < 0:
        raise InputError("seed must be a nonnegative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def n_blocks(R: int) -> int:
    return -(-int(R) // BLOCK)


def block_sizes(R: int):
    return [min(BLOCK, R - b * BLOCK) for b in range(n_blocks(R))]


@dataclass(frozen=True, eq=False)
class Bernoulli:
    """Independent coin flips with per-unit probability ``p`` (scalar or vector)."""

    n: int
    p: Union[float, np.ndarray] = 0.5

    def __post_init__(self):
        p = np.broadcast_to(np.asarray(self.p, dtype=float), (self.n,)).copy()
        if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
            raise InputError("Bernoulli probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def sample_block(self, rng, size):
        return rng.random((size, self.n)) < self.p, None

    def support_size(self) -> int:
        return 2 ** int(np.sum((self.p > 0) & (self.p < 1)))

    def _enumerate(self):
        free = np.flatnonzero((self.p > 0) & (self.p < 1))
        base = self.p >= 1
        rows, probs = [], []
        for combo in itertools.product((False, True), repeat=free.size):
            d = base.copy()
            d[free] = combo
            pr = np.prod(np.where(d[free], self.p[free], 1 - self.p[free]))
            rows.append(d)
            probs.append(pr)
        return np.array(rows, dtype=bool).reshape(-1, self.n), np.array(probs, dtype=float)


@dataclass(frozen=True)
class CompleteRandomization:
    """Exactly ``m`` of ``n`` units treated, uniformly."""

    n: int
    m: int

    def __post_init__(self):
        if not 0 <= self.m <= self.n:
            raise InputError(f"need 0 <= m <= n, got m={self.m}, n={self.n}")

    def sample_block(self, rng, size):
        out = np.zeros((size, self.n), dtype=bool)
        if self.m == self.n:
            out[:] = True
        elif self.m > 0:
            keys = rng.random((size, self.n))
            idx = np.argpartition(keys, self.m - 1, axis=1)[:, : self.m]
            np.put_along_axis(out, idx, True, axis=1)
        return out, None

    def support_size(self) -> int:
        return math.comb(self.n, self.m)

    def _enumerate(self):
        rows = []
        for idx in itertools.combinations(range(self.n), self.m):
            d = np.zeros(self.n, dtype=bool)
            d[list(idx)] = True
            rows.append(d)
        B = np.array(rows, dtype=bool).reshape(-1, self.n)
        return B, np.full(B.shape[0], 1.0 / B.shape[0])


@dataclass(frozen=True, eq=False)
class StratifiedComplete:
    """Complete randomization within strata.

    ``strata`` gives a stratum label per unit; ``treated`` maps label -> number
    treated in that stratum. Cluster designs map clusters onto strata.
    """

    strata: Sequence
    treated: dict

    def __post_init__(self):
        labels = np.asarray(self.strata)
        object.__setattr__(self, "strata", labels)
        groups = {}
        for lab in dict.fromkeys(labels.tolist()):
            members = np.flatnonzero(labels == lab)
            m = int(self.treated.get(lab, 0))
            if not 0 <= m <= members.size:
                raise InputError(f"stratum {lab!r}: cannot treat {m} of {members.size}")
            groups[lab] = (members, m)
        extra = set(self.treated) - set(groups)
        if extra:
            raise InputError(f"treated counts for unknown strata {sorted(map(str, extra))}")
        object.__setattr__(self, "_groups", groups)

    @property
    def n(self) -> int:
        return self.strata.size

    def sample_block(self, rng, size):
        out = np.zeros((size, self.n), dtype=bool)
        for members, m in self._groups.values():
            if m == 0:
                continue
            if m == members.size:
                out[:, members] = True
                continue
            keys = rng.random((size, members.size))
            pick = np.argpartition(keys, m - 1, axis=1)[:, :m]
            rows = np.repeat(np.arange(size), m)
            out[rows, members[pick.ravel()]] = True
        return out, None

    def support_size(self) -> int:
        return math.prod(math.comb(mem.size, m) for mem, m in self._groups.values())

    def _enumerate(self):
        per = []
        for members, m in self._groups.values():
            per.append([members[list(c)] for c in itertools.combinations(range(members.size), m)])
        rows = []
        for choice in itertools.product(*per):
            d = np.zeros(self.n, dtype=bool)
            for idx in choice:
                d[idx] = True
            rows.append(d)
        B = np.array(rows, dtype=bool).reshape(-1, self.n)
        return B, np.full(B.shape[0], 1.0 / B.shape[0])


@dataclass(frozen=True, eq=False)
class EnumeratedPool:
    """Finite list of assignments with probabilities (uniform by default)."""

    assignments: np.ndarray
    probabilities: Optional[np.ndarray] = None
    ids: Optional[tuple] = field(default=None)

    def __post_init__(self):
        B = np.asarray(self.assignments)
        if B.ndim != 2 or B.shape[0] == 0:
            raise InputError("pool must be a non-empty (K, n) array")
        B = as_assignment_matrix(B, B.shape[1]).copy()
        B.setflags(write=False)
        object.__setattr__(self, "assignments", B)
        if self.probabilities is None:
            p = None
        else:
            p = np.asarray(self.probabilities, dtype=float).copy()
            if p.shape != (B.shape[0],) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise InputError("pool probabilities must be nonnegative and sum to 1")
            p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != B.shape[0]:
                raise InputError("pool ids do not match the number of assignments")
            object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.assignments.shape[1]

    @property
    def size(self) -> int:
        return self.assignments.shape[0]

    @property
    def probs(self) -> np.ndarray:
        if self.probabilities is None:
            return np.full(self.size, 1.0 / self.size)
        return self.probabilities

    def sample_block(self, rng, size):
        if self.probabilities is None:
            idx = rng.integers(0, self.size, size=size)
        else:
            idx = rng.choice(self.size, size=size, p=self.probabilities)
        return self.assignments[idx], idx

    def support_size(self) -> int:
        return self.size

    def _enumerate(self):
        return self.assignments, self.probs

    def index_of(self, d) -> Optional[int]:
        d = as_assignment(d, self.n)
        hit = np.flatnonzero(np.all(self.assignments == d, axis=1))
        return int(hit[0]) if hit.size else None


AssignmentMechanism = Union[Bernoulli, CompleteRandomization, StratifiedComplete, EnumeratedPool]


def sample(mech: AssignmentMechanism, rng: np.random.Generator) -> np.ndarray:
    """One draw ``d ~ P(D)``."""
    return mech.sample_block(rng, 1)[0][0]


def sample_block(mech: AssignmentMechanism, rng: np.random.Generator, size: int):
    """``size`` draws as an ``(size, n)`` matrix plus pool indices (or ``None``)."""
    return mech.sample_block(rng, int(size))


def draw_block(mech: AssignmentMechanism, seed: int, b: int, size: int, stream=()):
    """Block ``b`` of the replicate stream; returns (bits, pool index, generator).

    The generator is returned positioned after the draws so callers can take
    further per-replicate randomness (tie breaking) from the same substream.
    """
    rng = stream_rng(seed, *stream, b)
    bits, idx = mech.sample_block(rng, size)
    return bits, idx, rng


def enumerate_support(mech: AssignmentMechanism, cap: int = DEFAULT_CAP):
    """Full support ``(assignments, probabilities)``.

    Raises :class:`SupportTooLarge` above ``cap``; use Monte Carlo mode instead.
    """
    size = mech.support_size()
    if size > cap:
        raise SupportTooLarge(
            f"support has {size} assignments (cap {cap}); use monte_carlo mode instead"
        )
    B, p = mech._enumerate()
    return B, p


# -- files ------------------------------------------------------------------

def load_pool_csv(path, unit_ids: Sequence[str]) -> EnumeratedPool:
    """Read a pool file.

    Two layouts are accepted: long (``assignment_id,unit_id,treated``) and packed
    (``assignment_id,bits`` with one 0/1 character per unit in ``unit_ids`` order).
    An optional ``probability`` column (packed layout) sets non-uniform weights.
    """
    path = Path(path)
    index = {str(u): i for i, u in enumerate(unit_ids)}
    n = len(index)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        order: list[str] = []
        rows: dict[str, np.ndarray] = {}
        probs: dict[str, float] = {}
        if {"assignment_id", "unit_id", "treated"} <= cols:
            for row in reader:
                line = reader.line_num
                aid = row["assignment_id"].strip()
                uid = row["unit_id"].strip()
                if uid not in index:
                    raise FormatError(f"unknown unit id {uid!r}", line=line, path=path)
                val = row["treated"].strip()
                if val not in {"0", "1"}:
                    raise FormatError(f"treated must be 0/1, got {val!r}", line=line, path=path)
                if aid not in rows:
                    rows[aid] = np.zeros(n, dtype=bool)
                    order.append(aid)
                rows[aid][index[uid]] = val == "1"
        elif {"assignment_id", "bits"} <= cols:
            for row in reader:
                line = reader.line_num
                aid, s = row["assignment_id"].strip(), row["bits"].strip()
                if len(s) != n or set(s) - {"0", "1"}:
                    raise FormatError(f"bits must be {n} characters of 0/1", line=line, path=path)
                if aid in rows:
                    raise FormatError(f"duplicate assignment {aid!r}", line=line, path=path)
                rows[aid] = np.frombuffer(s.encode(), dtype=np.uint8) == ord("1")
                order.append(aid)
                if row.get("probability"):
                    probs[aid] = float(row["probability"])
        else:
            raise FormatError(
                "pool needs columns assignment_id,unit_id,treated or assignment_id,bits",
                line=1, path=path,
            )
    if not order:
        raise FormatError("pool file has no assignments", path=path)
    B = np.stack([rows[a] for a in order])
    p = None
    if probs:
        if len(probs) != len(order):
            raise FormatError("probability column must be filled for every row", path=path)
        p = np.array([probs[a] for a in order])
    try:
        return EnumeratedPool(B, p, ids=tuple(order))
    except InputError as exc:
        raise FormatError(str(exc), path=path) from None


def write_pool_csv(pool: EnumeratedPool, path) -> None:
    ids = pool.ids or tuple(f"a{r}" for r in range(pool.size))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["assignment_id", "bits"])
        for aid, row in zip(ids, pool.assignments):
            w.writerow([aid, "".join("1" if x else "0" for x in row)])


def mechanism_from_config(cfg: dict, n: int, unit_ids: Sequence[str], base_dir=None):
    """Build a mechanism from its JSON block (``variant`` plus parameters)."""
    allowed = {
        "bernoulli": {"variant", "p"},
        "complete": {"variant", "m"},
        "stratified": {"variant", "strata", "treated"},
        "pool": {"variant", "path", "probabilities"},
    }
    variant = cfg.get("variant")
    if variant not in allowed:
        raise InputError(f"mechanism.variant must be one of {sorted(allowed)}, got {variant!r}")
    unknown = set(cfg) - allowed[variant]
    if unknown:
        raise InputError(f"unknown mechanism keys {sorted(unknown)}")
    if variant == "bernoulli":
        return Bernoulli(n, cfg.get("p", 0.5))
    if variant == "complete":
        if "m" not in cfg:
            raise InputError("mechanism.m is required for complete randomization")
        return CompleteRandomization(n, int(cfg["m"]))
    if variant == "stratified":
        strata = cfg["strata"]
        if isinstance(strata, dict):
            strata = [strata[u] for u in unit_ids]
        return StratifiedComplete(list(strata), dict(cfg["treated"]))
    path = Path(cfg["path"])
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    pool = load_pool_csv(path, unit_ids)
    if cfg.get("probabilities") is not None:
        pool = EnumeratedPool(pool.assignments, cfg["probabilities"], ids=pool.ids)
    return pool
