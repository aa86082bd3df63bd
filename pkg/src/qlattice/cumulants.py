"""
Set partitions, non-crossing partitions, and classical / free cumulants.

Slots of an ``n``-point function are numbered ``1..n`` in partitions and
``0..n-1`` in moment functionals.  A ``MomentFunctional`` evaluates
``omega(A_{i_1} ... A_{i_k})`` for any increasing tuple of slots, which is
all the cumulant formulas need: ``omega_pi`` is the product over blocks of
the order-preserving restrictions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ArityTooLarge, IncompleteTable
from .operators import LocalOperator, distance
from .states import expect_product

ARITY_CAP = 10
KINDS = ("all", "noncrossing")


@dataclass(frozen=True)
class Partition:
    """Set partition of ``{1..n}``; blocks sorted internally and by minimum."""

    blocks: tuple[tuple[int, ...], ...]
    n: int

    def __post_init__(self):
        flat = sorted(i for b in self.blocks for i in b)
        if flat != list(range(1, self.n + 1)):
            raise ValueError("blocks must partition {1..n}")
        if any(list(b) != sorted(b) or not b for b in self.blocks):
            raise ValueError("blocks must be nonempty and sorted")
        mins = [b[0] for b in self.blocks]
        if mins != sorted(mins):
            raise ValueError("blocks must be ordered by their minimum")

    @classmethod
    def from_blocks(cls, blocks: Iterable[Iterable[int]]) -> "Partition":
        bl = sorted((tuple(sorted(b)) for b in blocks), key=lambda b: b[0])
        return cls(tuple(bl), sum(len(b) for b in bl))

    def __len__(self):
        return len(self.blocks)

    def labels(self) -> list[int]:
        lab = [0] * self.n
        for k, b in enumerate(self.blocks):
            for i in b:
                lab[i - 1] = k
        return lab

    def is_noncrossing(self) -> bool:
        return is_noncrossing(self)

    def to_list(self) -> list[list[int]]:
        return [list(b) for b in self.blocks]


class NonCrossingPartition(Partition):
    """A partition certified non-crossing at construction."""

    def __post_init__(self):
        super().__post_init__()
        if not is_noncrossing(self):
            raise ValueError(f"{self.to_list()} is crossing")


def is_noncrossing(p: Partition) -> bool:
    """True unless some ``i<j<k<l`` has ``i,k`` in one block and ``j,l`` in another."""
    lab = p.labels()
    n = len(lab)
    for i in range(n):
        for k in range(i + 2, n):
            if lab[i] != lab[k]:
                continue
            inner = set(lab[i + 1:k]) - {lab[i]}
            if inner and any(lab[l] in inner for l in range(k + 1, n)):
                return False
    return True


def _check_arity(n: int, cap: int):
    if n < 0:
        raise ValueError("arity must be nonnegative")
    if n > cap:
        raise ArityTooLarge(f"arity {n} exceeds cap {cap}")


@lru_cache(maxsize=4096)
def _all_partitions(elems: tuple[int, ...]) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """Block containing the first element, times partitions of what is left."""
    if not elems:
        return ((),)
    first, rest = elems[0], elems[1:]
    out = []
    for k in range(len(rest) + 1):
        for idx in combinations(range(len(rest)), k):
            block = ((first,) + tuple(rest[i] for i in idx),)
            chosen = set(idx)
            remaining = tuple(e for i, e in enumerate(rest) if i not in chosen)
            out.extend(block + tail for tail in _all_partitions(remaining))
    return tuple(out)


@lru_cache(maxsize=4096)
def _nc_partitions(elems: tuple[int, ...]) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """Block ``V`` containing the first element; the gaps between consecutive
    elements of ``V`` (and after its last) are partitioned independently."""
    if not elems:
        return ((),)
    first, rest = elems[0], elems[1:]
    out = []
    for k in range(len(rest) + 1):
        for extra in combinations(range(len(rest)), k):
            block = (first,) + tuple(rest[i] for i in extra)
            cuts = [-1] + list(extra) + [len(rest)]
            gaps = [tuple(rest[cuts[g] + 1:cuts[g + 1]]) for g in range(len(cuts) - 1)]
            combos = [(block,)]
            for gap in gaps:
                combos = [c + tail for c in combos for tail in _nc_partitions(gap)]
            # blocks from later gaps may start before blocks of earlier ones
            out.extend(tuple(sorted(c)) for c in combos)
    return tuple(out)


@lru_cache(maxsize=None)
def _enumerate_cached(n: int, kind: str) -> tuple[Partition, ...]:
    elems = tuple(range(1, n + 1))
    raw = _all_partitions(elems) if kind == "all" else _nc_partitions(elems)
    cls = Partition if kind == "all" else NonCrossingPartition
    parts = []
    for blocks in raw:
        # the recursions already emit sorted blocks ordered by minimum
        p = object.__new__(cls)
        object.__setattr__(p, "blocks", blocks)
        object.__setattr__(p, "n", n)
        parts.append(p)
    return tuple(parts)


def enumerate_partitions(n: int, kind: str = "all", cap: int = ARITY_CAP) -> list[Partition]:
    """All (or all non-crossing) partitions of ``{1..n}``, in the deterministic
    order produced by the first-block recursion."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    _check_arity(n, cap)
    return list(_enumerate_cached(n, kind))


def mobius_to_top(pi: Partition) -> int:
    """Moebius function of the partition lattice from ``pi`` to the one-block partition."""
    k = len(pi)
    return (-1) ** (k - 1) * math.factorial(k - 1)


# ---------------------------------------------------------------------------
# Moment functionals
# ---------------------------------------------------------------------------

class MomentFunctional:
    """Joint moments of ``n`` slots, evaluated lazily and cached.

    Parameters
    ----------
    n : int
        Number of slots.
    evaluator : callable
        Maps an increasing tuple of 0-based slots to the moment of the
        corresponding operators multiplied in slot order.
    """

    def __init__(self, n: int, evaluator: Callable[[tuple[int, ...]], complex]):
        self.n = n
        self._eval = evaluator
        self._cache: dict[tuple[int, ...], complex] = {(): 1.0 + 0j}

    def __call__(self, slots: Sequence[int]) -> complex:
        key = tuple(slots)
        if key not in self._cache:
            self._cache[key] = complex(self._eval(key))
        return self._cache[key]

    @classmethod
    def from_state(cls, state, ops: Sequence[LocalOperator]) -> "MomentFunctional":
        ops = list(ops)

        def evaluate(slots):
            if len(slots) == 1:
                return state.expect(ops[slots[0]])
            prod = ops[slots[0]]
            for s in slots[1:-1]:
                prod = prod @ ops[s]
            return expect_product(state, prod, ops[slots[-1]])
        return cls(len(ops), evaluate)

    @classmethod
    def from_table(cls, n: int, table: Mapping[tuple[int, ...], complex]) -> "MomentFunctional":
        table = {tuple(k): v for k, v in table.items()}

        def evaluate(slots):
            if slots not in table:
                raise IncompleteTable(f"moment for slots {slots} missing")
            return table[slots]
        return cls(n, evaluate)

    def restricted(self, pi: Partition, slots: Sequence[int] | None = None) -> complex:
        """``omega_pi``: product over blocks of order-preserving restrictions."""
        slots = list(range(self.n)) if slots is None else list(slots)
        val = 1.0 + 0j
        for block in pi.blocks:
            val *= self(tuple(slots[i - 1] for i in block))
        return val


def _functional(m, ops) -> MomentFunctional:
    if isinstance(m, MomentFunctional):
        return m
    if ops is None:
        raise ValueError("operators are required when a state is given")
    return MomentFunctional.from_state(m, ops)


def _kind_of(kind: str) -> str:
    if kind in ("classical", "all"):
        return "all"
    if kind in ("free", "noncrossing"):
        return "noncrossing"
    raise ValueError(f"unknown cumulant kind {kind!r}")


def cumulant_table(m: MomentFunctional, kind: str = "classical",
                   cap: int = ARITY_CAP) -> dict[tuple[int, ...], complex]:
    """Cumulants of every nonempty increasing slot tuple, by the recursion
    ``kappa(S) = omega(S) - sum_{pi != top} prod_V kappa(V)``."""
    kind = _kind_of(kind)
    _check_arity(m.n, cap)
    table: dict[tuple[int, ...], complex] = {}
    for size in range(1, m.n + 1):
        parts = enumerate_partitions(size, kind, cap)
        for S in combinations(range(m.n), size):
            val = m(S)
            for pi in parts:
                if len(pi) == 1:
                    continue
                prod = 1.0 + 0j
                for block in pi.blocks:
                    prod *= table[tuple(S[i - 1] for i in block)]
                val -= prod
            table[S] = val
    return table


def classical_cumulant(m, ops: Sequence[LocalOperator] | None = None,
                       method: str = "mobius", cap: int = ARITY_CAP) -> complex:
    """Classical (Ursell) cumulant ``c_n(A_1, ..., A_n)``.

    ``method="mobius"`` sums ``(-1)^{|pi|-1} (|pi|-1)! omega_pi`` over all
    partitions; ``method="recursive"`` solves the moment-cumulant relation.
    ``m`` is a ``MomentFunctional`` or a state (then ``ops`` is required).
    """
    m = _functional(m, ops)
    _check_arity(m.n, cap)
    if method == "recursive":
        return cumulant_table(m, "classical", cap)[tuple(range(m.n))]
    if method != "mobius":
        raise ValueError("method must be 'mobius' or 'recursive'")
    return complex(sum(mobius_to_top(pi) * m.restricted(pi)
                       for pi in enumerate_partitions(m.n, "all", cap)))


def free_cumulant(m, ops: Sequence[LocalOperator] | None = None,
                  cap: int = ARITY_CAP) -> complex:
    """Free cumulant ``kappa_n`` by the non-crossing moment-cumulant recursion."""
    m = _functional(m, ops)
    _check_arity(m.n, cap)
    return cumulant_table(m, "free", cap)[tuple(range(m.n))]


def cumulants_to_moments(kappa: Mapping[tuple[int, ...], complex], n: int,
                         kind: str = "classical", cap: int = ARITY_CAP) -> complex:
    """``omega_n = sum_pi kappa_pi`` over all or non-crossing partitions.

    ``kappa`` maps increasing 0-based slot tuples to cumulants; every block
    of every partition of ``{0..n-1}`` must be present.
    """
    kind = _kind_of(kind)
    _check_arity(n, cap)
    total = 0j
    for pi in enumerate_partitions(n, kind, cap):
        prod = 1.0 + 0j
        for block in pi.blocks:
            key = tuple(i - 1 for i in block)
            if key not in kappa:
                raise IncompleteTable(f"cumulant for slots {key} missing")
            prod *= kappa[key]
        total += prod
    return complex(total)


# ---------------------------------------------------------------------------
# Clustering experiments
# ---------------------------------------------------------------------------

def max_min_distance(supports: Sequence[Sequence[int]]) -> float:
    """``max_i min_{j != i} dist(X_i, X_j)``."""
    best = 0.0
    for i, Xi in enumerate(supports):
        d = min(distance(Xi, Xj) for j, Xj in enumerate(supports) if j != i)
        best = max(best, d)
    return best


@dataclass
class DecayTable:
    rows: list[dict]
    log_slope: float | None
    metadata: dict

    def to_rows(self) -> list[tuple[float, int, float]]:
        return [(r["z"], r["n"], r["abs_cumulant"]) for r in self.rows]


def cumulant_decay_scan(state, evolver, ops: Sequence[LocalOperator],
                        schedule: Sequence[Sequence[int]], times: Sequence[float],
                        kind: str = "classical") -> DecayTable:
    """``|c_n|`` of translated and evolved operators against their spread.

    Parameters
    ----------
    schedule : sequence of displacement tuples
        Configuration ``k`` uses ``A_i`` translated by ``schedule[k][i]``.
    times : sequence of float
        Evolution time of each slot (shared by all configurations).
    evolver : Evolver or None
        ``None`` means no evolution (all times must be 0).

    The spread ``z`` is the max-min distance of the translated, unevolved
    supports.  ``log_slope`` is the regression slope of ``log|c_n|`` on ``z``
    over the strictly positive values.
    """
    n = len(ops)
    rows = []
    cache: dict[tuple[int, int, float], LocalOperator] = {}

    def evolved(i, x, t):
        key = (i, x, t)
        if key not in cache:
            if evolver is None:
                if t != 0:
                    raise ValueError("evolution requested without an evolver")
                cache[key] = ops[i].translate(x)
            else:
                op = evolver.window.shift(ops[i], x)
                cache[key] = evolver.evolve(op, t) if t > 0 else op
        return cache[key]

    for disp in schedule:
        disp = tuple(int(x) for x in disp)
        supports = [ops[i].translate(disp[i]).support for i in range(n)]
        z = max_min_distance(supports)
        evolved_ops = [evolved(i, disp[i], float(times[i])) for i in range(n)]
        m = MomentFunctional.from_state(state, evolved_ops)
        if _kind_of(kind) == "all":
            val = classical_cumulant(m)
        else:
            val = free_cumulant(m)
        rows.append({"z": z, "n": n, "displacements": list(disp), "cumulant": val,
                     "abs_cumulant": abs(val)})
    zs = np.array([r["z"] for r in rows], dtype=float)
    vals = np.array([r["abs_cumulant"] for r in rows])
    mask = (vals > 0) & np.isfinite(zs)
    slope = None
    if mask.sum() >= 2 and np.ptp(zs[mask]) > 0:
        slope = float(np.polyfit(zs[mask], np.log(vals[mask]), 1)[0])
    meta = {"times": [float(t) for t in times], "kind": kind,
            "state": getattr(state, "descriptor", lambda: {})()}
    if evolver is not None:
        meta["evolver"] = evolver.describe()
    return DecayTable(rows, slope, meta)
