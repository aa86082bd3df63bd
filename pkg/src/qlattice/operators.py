"""
Local operators on a one-dimensional spin-1/2 lattice.

An operator is stored as a complex linear combination of Pauli strings.
Each string is encoded symplectically by two bitmasks ``(x, z)`` relative
to an integer ``origin`` site: bit ``b`` refers to site ``origin + b`` and

    P(x, z) = i^{|x & z|} X^x Z^z ,

so that ``(1, 0) -> X``, ``(0, 1) -> Z`` and ``(1, 1) -> Y``.  Masks are
``uint64``, which caps the span of a single operator at 64 sites.

Products, commutators and translations are exact on this representation;
dense matrices are only built for norms and traces.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SupportOutsideWindow, SupportTooLarge

MAX_SPAN = 64
DENSE_LIMIT = 12

_U64 = np.uint64
_PHASES = np.array([1.0, 1.0j, -1.0, -1.0j], dtype=complex)
_LETTER_BITS = {"X": (1, 0), "Y": (1, 1), "Z": (0, 1)}
_BITS_LETTER = {(1, 0): "X", (1, 1): "Y", (0, 1): "Z"}


def _popcount(a):
    return np.bitwise_count(a).astype(np.int64)


def _lowest_bit(u: int) -> int:
    return (u & -u).bit_length() - 1


def _bits(u: int) -> list[int]:
    out = []
    b = 0
    while u:
        if u & 1:
            out.append(b)
        u >>= 1
        b += 1
    return out


@dataclass(frozen=True, order=True)
class PauliString:
    """A tensor product of X, Y, Z letters on finitely many sites.

    ``letters`` is a tuple of ``(site, letter)`` pairs sorted by site.
    Identity factors are never stored.
    """

    letters: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        sites = [s for s, _ in self.letters]
        if sites != sorted(set(sites)):
            raise ValueError("PauliString sites must be strictly increasing")
        for _, letter in self.letters:
            if letter not in _LETTER_BITS:
                raise ValueError(f"invalid Pauli letter {letter!r}")

    @classmethod
    def from_dict(cls, mapping: Mapping[int, str]) -> "PauliString":
        items = sorted((int(s), l.upper()) for s, l in mapping.items() if l.upper() != "I")
        return cls(tuple(items))

    @classmethod
    def parse(cls, text: str) -> "PauliString":
        """Parse ``"X0 Z3"`` style strings; an empty string is the identity."""
        mapping = {}
        for token in text.split():
            mapping[int(token[1:])] = token[0]
        return cls.from_dict(mapping)

    @property
    def sites(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.letters)

    def __str__(self):
        if not self.letters:
            return "I"
        return " ".join(f"{l}{s}" for s, l in self.letters)


def _encode(strings: Sequence[PauliString]):
    sites = [s for p in strings for s in p.sites]
    origin = min(sites) if sites else 0
    x = np.zeros(len(strings), dtype=_U64)
    z = np.zeros(len(strings), dtype=_U64)
    for k, p in enumerate(strings):
        xi = zi = 0
        for s, letter in p.letters:
            b = s - origin
            if b >= MAX_SPAN:
                raise SupportTooLarge(f"operator span exceeds {MAX_SPAN} sites")
            bx, bz = _LETTER_BITS[letter]
            xi |= bx << b
            zi |= bz << b
        x[k] = xi
        z[k] = zi
    return origin, x, z


def _canonical(origin: int, x, z, c, prune: float = 0.0):
    """Merge duplicate strings, drop zero coefficients, normalise the origin."""
    if len(c) == 0:
        return 0, np.zeros(0, _U64), np.zeros(0, _U64), np.zeros(0, complex)
    supp = x | z
    width = int(np.bitwise_or.reduce(supp)).bit_length()
    new = np.ones(len(c), dtype=bool)
    if width <= 21:
        # one packed key sorts by (support, x, z) much faster than lexsort
        key = (supp << _U64(42)) | (x << _U64(21)) | z
        order = np.argsort(key, kind="stable")
        key = key[order]
        new[1:] = key[1:] != key[:-1]
    else:
        order = np.lexsort((z, x, supp))
    x, z, c = x[order], z[order], c[order]
    if width > 21:
        new[1:] = (x[1:] != x[:-1]) | (z[1:] != z[:-1])
    starts = np.flatnonzero(new)
    c = np.add.reduceat(c, starts)
    x, z = x[starts], z[starts]
    keep = np.abs(c) > prune if prune > 0 else c != 0
    x, z, c = x[keep], z[keep], c[keep]
    union = int(np.bitwise_or.reduce(x | z)) if len(c) else 0
    if union == 0:
        return 0, x, z, c
    shift = _lowest_bit(union)
    if shift:
        x = x >> _U64(shift)
        z = z >> _U64(shift)
    return origin + shift, x, z, c


def _shifted(x, shift: int):
    return x << _U64(shift) if shift else x


class LocalOperator:
    """Finite linear combination of Pauli strings on the lattice ``Z``.

    Instances are immutable after construction and always canonical:
    duplicate strings merged, exact zeros removed, strings ordered by
    support bitmask then letters.  No magnitude pruning happens unless
    ``prune`` is passed explicitly.

    Parameters
    ----------
    terms : mapping PauliString -> complex, optional
    prune : float
        Drop coefficients with ``|c| <= prune``.  Default 0 (exact algebra).
    """

    __slots__ = ("origin", "x", "z", "c", "_support")

    def __init__(self, terms: Mapping[PauliString, complex] | None = None, prune: float = 0.0):
        terms = dict(terms or {})
        strings = list(terms)
        origin, x, z = _encode(strings)
        c = np.array([terms[p] for p in strings], dtype=complex)
        self._set(*_canonical(origin, x, z, c, prune))

    def _set(self, origin, x, z, c):
        self.origin = int(origin)
        self.x = x
        self.z = z
        self.c = c
        for arr in (x, z, c):
            arr.flags.writeable = False
        self._support = None

    @classmethod
    def _from_arrays(cls, origin, x, z, c, prune: float = 0.0) -> "LocalOperator":
        op = cls.__new__(cls)
        op._set(*_canonical(origin, np.asarray(x, _U64), np.asarray(z, _U64),
                            np.asarray(c, complex), prune))
        return op

    @classmethod
    def identity(cls, coeff: complex = 1.0) -> "LocalOperator":
        return cls({PauliString(): coeff})

    @classmethod
    def zero(cls) -> "LocalOperator":
        return cls()

    @classmethod
    def from_string(cls, text: str, coeff: complex = 1.0) -> "LocalOperator":
        return cls({PauliString.parse(text): coeff})

    # ---- inspection ----
    @property
    def n_terms(self) -> int:
        return len(self.c)

    @property
    def support(self) -> tuple[int, ...]:
        if self._support is None:
            union = int(np.bitwise_or.reduce(self.x | self.z)) if self.n_terms else 0
            self._support = tuple(self.origin + b for b in _bits(union))
        return self._support

    @property
    def support_mask(self) -> int:
        return int(np.bitwise_or.reduce(self.x | self.z)) if self.n_terms else 0

    def is_zero(self) -> bool:
        return self.n_terms == 0

    def is_scalar(self) -> bool:
        return len(self.support) == 0

    def identity_coefficient(self) -> complex:
        mask = (self.x == 0) & (self.z == 0)
        return complex(self.c[mask].sum()) if mask.any() else 0j

    def strings(self) -> list[PauliString]:
        out = []
        for xi, zi in zip(self.x.tolist(), self.z.tolist()):
            letters = []
            for b in _bits(xi | zi):
                letters.append((self.origin + b, _BITS_LETTER[((xi >> b) & 1, (zi >> b) & 1)]))
            out.append(PauliString(tuple(letters)))
        return out

    @property
    def terms(self) -> dict[PauliString, complex]:
        return dict(zip(self.strings(), self.c.tolist()))

    def __iter__(self):
        return iter(self.terms.items())

    def __repr__(self):
        if self.is_zero():
            return "LocalOperator(0)"
        parts = [f"({c:.6g})*[{p}]" for p, c in list(self.terms.items())[:8]]
        more = " + ..." if self.n_terms > 8 else ""
        return "LocalOperator(" + " + ".join(parts) + more + ")"

    # ---- algebra ----
    def _aligned(self, other: "LocalOperator"):
        if self.is_scalar() and other.is_scalar():
            origin = 0
        elif self.is_scalar():
            origin = other.origin
        elif other.is_scalar():
            origin = self.origin
        else:
            origin = min(self.origin, other.origin)
        s1 = 0 if self.is_scalar() else self.origin - origin
        s2 = 0 if other.is_scalar() else other.origin - origin
        top = max(s1 + self.support_mask.bit_length(), s2 + other.support_mask.bit_length())
        if top > MAX_SPAN:
            raise SupportTooLarge(f"combined span {top} exceeds {MAX_SPAN} sites")
        return (origin, _shifted(self.x, s1), _shifted(self.z, s1),
                _shifted(other.x, s2), _shifted(other.z, s2))

    def __add__(self, other):
        if not isinstance(other, LocalOperator):
            other = LocalOperator.identity(other)
        origin, x1, z1, x2, z2 = self._aligned(other)
        return LocalOperator._from_arrays(
            origin, np.concatenate([x1, x2]), np.concatenate([z1, z2]),
            np.concatenate([self.c, other.c]))

    __radd__ = __add__

    def __neg__(self):
        return LocalOperator._from_arrays(self.origin, self.x, self.z, -self.c)

    def __sub__(self, other):
        if not isinstance(other, LocalOperator):
            other = LocalOperator.identity(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, LocalOperator):
            return multiply(self, other)
        return LocalOperator._from_arrays(self.origin, self.x, self.z, self.c * complex(other))

    def __rmul__(self, other):
        return LocalOperator._from_arrays(self.origin, self.x, self.z, self.c * complex(other))

    def __matmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        return self * (1.0 / complex(other))

    def __eq__(self, other):
        if not isinstance(other, LocalOperator):
            return NotImplemented
        return (self.origin == other.origin and np.array_equal(self.x, other.x)
                and np.array_equal(self.z, other.z) and np.array_equal(self.c, other.c))

    def __hash__(self):
        return hash((self.origin, self.x.tobytes(), self.z.tobytes(), self.c.tobytes()))

    def adjoint(self) -> "LocalOperator":
        # every Pauli string is Hermitian in this encoding
        return LocalOperator._from_arrays(self.origin, self.x, self.z, np.conj(self.c))

    dag = adjoint

    def is_hermitian(self, atol: float = 0.0) -> bool:
        return (self - self.adjoint()).max_abs_coefficient() <= atol

    def max_abs_coefficient(self) -> float:
        return float(np.abs(self.c).max()) if self.n_terms else 0.0

    def allclose(self, other: "LocalOperator", atol: float = 1e-12) -> bool:
        return (self - other).max_abs_coefficient() <= atol

    def translate(self, shift: int) -> "LocalOperator":
        return translate(self, shift)

    def pruned(self, eps: float) -> "LocalOperator":
        return LocalOperator._from_arrays(self.origin, self.x, self.z, self.c, prune=eps)

    def norm(self, dense_limit: int = DENSE_LIMIT) -> float:
        return operator_norm(self, dense_limit)

    # ---- conversions ----
    def to_sparse(self, sites: Sequence[int] | None = None) -> sp.csr_matrix:
        return to_sparse(self, sites)

    def to_dense(self, sites: Sequence[int] | None = None) -> np.ndarray:
        return to_sparse(self, sites).toarray()

    def to_json(self) -> list[dict]:
        return [{"sites": list(p.sites), "letters": "".join(l for _, l in p.letters),
                 "re": float(c.real), "im": float(c.imag)} for p, c in self.terms.items()]

    @classmethod
    def from_json(cls, data: str | list) -> "LocalOperator":
        if isinstance(data, str):
            data = json.loads(data)
        terms: dict[PauliString, complex] = {}
        for entry in data:
            sites, letters = entry["sites"], entry["letters"]
            if len(sites) != len(letters):
                raise ValueError("sites and letters must have equal length")
            p = PauliString.from_dict(dict(zip(sites, letters)))
            terms[p] = terms.get(p, 0) + complex(entry.get("re", 0.0), entry.get("im", 0.0))
        return cls(terms)


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def _cmul(a, b):
    """Complex product from separate real operations.

    numpy's complex multiply may fuse operations, which makes ``a*b`` and
    ``b*a`` differ in the last bit; this form is exactly commutative and
    commutes with conjugation.
    """
    re = a.real * b.real - a.imag * b.imag
    im = a.real * b.imag + a.imag * b.real
    return re + 1j * im


def _product_arrays(x1, z1, c1, x2, z2, c2, chunk: int = 1 << 22):
    """All pairwise products of two aligned Pauli tables (unmerged)."""
    xs, zs, cs = [], [], []
    a1 = _popcount(x1 & z1)
    a2 = _popcount(x2 & z2)
    step = max(1, chunk // max(1, len(c2)))
    for start in range(0, len(c1), step):
        sl = slice(start, start + step)
        X1, Z1 = x1[sl, None], z1[sl, None]
        x3 = X1 ^ x2[None, :]
        z3 = Z1 ^ z2[None, :]
        e = (a1[sl, None] + a2[None, :] - _popcount(x3 & z3) + 2 * _popcount(Z1 & x2[None, :])) % 4
        xs.append(x3.ravel())
        zs.append(z3.ravel())
        cs.append((_PHASES[e] * _cmul(c1[sl, None], c2[None, :])).ravel())
    if not xs:
        return np.zeros(0, _U64), np.zeros(0, _U64), np.zeros(0, complex)
    return np.concatenate(xs), np.concatenate(zs), np.concatenate(cs)


def multiply(A: LocalOperator, B: LocalOperator) -> LocalOperator:
    """Operator product ``A B`` in canonical form."""
    if A.is_zero() or B.is_zero():
        return LocalOperator.zero()
    origin, x1, z1, x2, z2 = A._aligned(B)
    x, z, c = _product_arrays(x1, z1, A.c, x2, z2, B.c)
    return LocalOperator._from_arrays(origin, x, z, c)


def _commutator_arrays(x1, z1, c1, x2, z2, c2):
    """Pairwise commutators of two aligned Pauli tables (unmerged).

    Only anticommuting string pairs contribute, each with ``2 P Q``.
    """
    sym = (_popcount(x1[:, None] & z2[None, :]) + _popcount(z1[:, None] & x2[None, :])) & 1
    i1, i2 = np.nonzero(sym)
    xa, za, xb, zb = x1[i1], z1[i1], x2[i2], z2[i2]
    x3, z3 = xa ^ xb, za ^ zb
    e = (_popcount(xa & za) + _popcount(xb & zb) - _popcount(x3 & z3) + 2 * _popcount(za & xb)) % 4
    return x3, z3, 2.0 * _PHASES[e] * _cmul(c1[i1], c2[i2])


def commutator(A: LocalOperator, B: LocalOperator) -> LocalOperator:
    """``[A, B] = AB - BA``, exactly zero for disjoint supports."""
    if A.is_zero() or B.is_zero():
        return LocalOperator.zero()
    origin, x1, z1, x2, z2 = A._aligned(B)
    return LocalOperator._from_arrays(origin, *_commutator_arrays(x1, z1, A.c, x2, z2, B.c))


def linear_combination(ops: Sequence[LocalOperator], coeffs: Sequence[complex] | None = None,
                       prune: float = 0.0) -> LocalOperator:
    """``sum_k coeffs[k] * ops[k]`` with a single canonicalization."""
    if coeffs is None:
        coeffs = [1.0] * len(ops)
    pairs = [(op, complex(a)) for op, a in zip(ops, coeffs) if not op.is_zero() and a != 0]
    if not pairs:
        return LocalOperator.zero()
    located = [op for op, _ in pairs if not op.is_scalar()]
    origin = min(op.origin for op in located) if located else 0
    xs, zs, cs = [], [], []
    for op, a in pairs:
        shift = 0 if op.is_scalar() else op.origin - origin
        if shift + op.support_mask.bit_length() > MAX_SPAN:
            raise SupportTooLarge(f"combined span exceeds {MAX_SPAN} sites")
        xs.append(_shifted(op.x, shift))
        zs.append(_shifted(op.z, shift))
        cs.append(op.c * a)
    return LocalOperator._from_arrays(origin, np.concatenate(xs), np.concatenate(zs),
                                      np.concatenate(cs), prune)


def anticommutator(A: LocalOperator, B: LocalOperator) -> LocalOperator:
    return multiply(A, B) + multiply(B, A)


def translate(A: LocalOperator, shift: int) -> LocalOperator:
    """Space translation: support moves by ``shift`` sites."""
    if A.is_scalar():
        return A
    op = LocalOperator.__new__(LocalOperator)
    op._set(A.origin + int(shift), A.x, A.z, A.c)
    return op


def wrap(A: LocalOperator, start: int, n: int) -> LocalOperator:
    """Map every site ``s`` to ``start + (s - start) mod n`` (periodic ring)."""
    if A.is_scalar():
        return A
    sites = A.support
    target = {s: start + (s - start) % n for s in sites}
    if all(target[s] == s for s in sites):
        return A
    return _remap_sites(A, target)


def _remap_sites(A: LocalOperator, target: Mapping[int, int]) -> LocalOperator:
    new_origin = min(target.values())
    x = np.zeros_like(A.x)
    z = np.zeros_like(A.z)
    for s in A.support:
        b = _U64(s - A.origin)
        nb = _U64(target[s] - new_origin)
        if int(nb) >= MAX_SPAN:
            raise SupportTooLarge("remapped span exceeds 64 sites")
        x |= ((A.x >> b) & _U64(1)) << nb
        z |= ((A.z >> b) & _U64(1)) << nb
    return LocalOperator._from_arrays(new_origin, x, z, A.c.copy())


# ---------------------------------------------------------------------------
# Named constructors
# ---------------------------------------------------------------------------

def sx(site: int) -> LocalOperator:
    return LocalOperator({PauliString(((site, "X"),)): 1.0})


def sy(site: int) -> LocalOperator:
    return LocalOperator({PauliString(((site, "Y"),)): 1.0})


def sz(site: int) -> LocalOperator:
    return LocalOperator({PauliString(((site, "Z"),)): 1.0})


def splus(site: int) -> LocalOperator:
    """sigma^+ = (sigma^1 + i sigma^2) / 2, raising the spin."""
    return LocalOperator({PauliString(((site, "X"),)): 0.5, PauliString(((site, "Y"),)): 0.5j})


def sminus(site: int) -> LocalOperator:
    return LocalOperator({PauliString(((site, "X"),)): 0.5, PauliString(((site, "Y"),)): -0.5j})


def proj_up(site: int) -> LocalOperator:
    """P^+ = (1 + sigma^3) / 2."""
    return LocalOperator({PauliString(): 0.5, PauliString(((site, "Z"),)): 0.5})


def proj_down(site: int) -> LocalOperator:
    return LocalOperator({PauliString(): 0.5, PauliString(((site, "Z"),)): -0.5})


def identity(coeff: complex = 1.0) -> LocalOperator:
    return LocalOperator.identity(coeff)


def magnetization(sites: Iterable[int]) -> LocalOperator:
    return LocalOperator({PauliString(((s, "Z"),)): 1.0 for s in sites})


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class Geometry(NamedTuple):
    supp_a: tuple[int, ...]
    supp_b: tuple[int, ...]
    dist: float
    diam_a: int
    diam_b: int
    empty: bool


def diameter(sites: Sequence[int]) -> int:
    return (max(sites) - min(sites)) if sites else 0


def distance(X: Sequence[int], Y: Sequence[int]) -> float:
    """l1 distance between two finite site sets; +inf if either is empty."""
    if not X or not Y:
        return float("inf")
    X, Y = np.asarray(sorted(X)), np.asarray(sorted(Y))
    idx = np.clip(np.searchsorted(Y, X), 1, len(Y) - 1) if len(Y) > 1 else np.zeros(len(X), int)
    best = np.abs(X - Y[idx])
    if len(Y) > 1:
        best = np.minimum(best, np.abs(X - Y[idx - 1]))
    return float(best.min())


def geometry(A: LocalOperator, B: LocalOperator) -> Geometry:
    """Supports, distance and diameters of two operators.

    Scalars have empty support; ``empty`` flags that case and the distance
    is then ``+inf`` so clustering bounds hold vacuously.
    """
    sa, sb = A.support, B.support
    return Geometry(sa, sb, distance(sa, sb), diameter(sa), diameter(sb),
                    empty=not sa or not sb)


# ---------------------------------------------------------------------------
# Dense conversion
# ---------------------------------------------------------------------------

def _matrix_masks(A: LocalOperator, sites: Sequence[int]):
    """Re-express the bitmasks of ``A`` in matrix bit order for ``sites``.

    Site ``sites[p]`` corresponds to matrix bit ``n - 1 - p`` so that the
    first listed site is the most significant tensor factor, as in ``np.kron``.
    """
    n = len(sites)
    pos = {s: p for p, s in enumerate(sites)}
    xm = np.zeros_like(A.x)
    zm = np.zeros_like(A.z)
    for s in A.support:
        if s not in pos:
            raise SupportOutsideWindow(f"site {s} not in window {list(sites)}")
        b = _U64(s - A.origin)
        mb = _U64(n - 1 - pos[s])
        xm |= ((A.x >> b) & _U64(1)) << mb
        zm |= ((A.z >> b) & _U64(1)) << mb
    return xm, zm


def to_sparse(A: LocalOperator, sites: Sequence[int] | None = None) -> sp.csr_matrix:
    """Sparse matrix of ``A`` on the listed sites (default: its support)."""
    sites = list(A.support) if sites is None else list(sites)
    n = len(sites)
    dim = 1 << n
    if A.is_zero():
        return sp.csr_matrix((dim, dim), dtype=complex)
    xm, zm = _matrix_masks(A, sites)
    basis = np.arange(dim, dtype=_U64)
    rows, cols, vals = [], [], []
    step = max(1, (1 << 22) // dim)
    pre = _PHASES[_popcount(xm & zm) % 4] * A.c
    for start in range(0, A.n_terms, step):
        sl = slice(start, start + step)
        r = basis[None, :] ^ xm[sl, None]
        sign = 1 - 2 * (_popcount(basis[None, :] & zm[sl, None]) & 1)
        rows.append(r.ravel())
        cols.append(np.broadcast_to(basis, r.shape).ravel())
        vals.append((pre[sl, None] * sign).ravel())
    rows = np.concatenate(rows).astype(np.int64)
    cols = np.concatenate(cols).astype(np.int64)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()


def to_dense(A: LocalOperator, sites: Sequence[int] | None = None) -> np.ndarray:
    return to_sparse(A, sites).toarray()


def _fwht(a: np.ndarray) -> np.ndarray:
    """Unnormalised Walsh-Hadamard transform along the last axis."""
    a = a.copy()
    rows, dim = a.shape
    h = 1
    while h < dim:
        v = a.reshape(rows, dim // (2 * h), 2, h)
        lo = v[:, :, 0, :].copy()
        hi = v[:, :, 1, :]
        v[:, :, 0, :] += hi
        v[:, :, 1, :] = lo - hi
        h *= 2
    return a


def from_dense(M, sites: Sequence[int], drop_tol: float = 1e-13) -> LocalOperator:
    """Pauli decomposition of a ``2^n x 2^n`` matrix acting on ``sites``.

    Coefficients with ``|c| <= drop_tol * max|c|`` are discarded; this is the
    only place where magnitude pruning happens by default, since round-off in
    dense arithmetic would otherwise populate every string.
    """
    sites = list(sites)
    n = len(sites)
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    dim = 1 << n
    if M.shape != (dim, dim):
        raise ValueError(f"matrix shape {M.shape} does not match {n} sites")
    if n == 0:
        return LocalOperator.identity(M[0, 0]) if M[0, 0] != 0 else LocalOperator.zero()
    basis = np.arange(dim, dtype=_U64)
    xs = basis
    V = M[(basis[None, :] ^ xs[:, None]).astype(np.int64), basis[None, :].astype(np.int64)]
    W = _fwht(V) / dim
    xg = np.repeat(xs, dim)
    zg = np.tile(basis, dim)
    coef = W.ravel() * np.conj(_PHASES[_popcount(xg & zg) % 4])
    scale = np.abs(coef).max() if coef.size else 0.0
    keep = np.abs(coef) > drop_tol * scale if scale > 0 else np.zeros(coef.shape, bool)
    xg, zg, coef = xg[keep], zg[keep], coef[keep]
    lo = min(sites)
    if max(sites) - lo >= MAX_SPAN:
        raise SupportTooLarge("window span exceeds 64 sites")
    x = np.zeros_like(xg)
    z = np.zeros_like(zg)
    for p, s in enumerate(sites):
        mb = _U64(n - 1 - p)
        b = _U64(s - lo)
        x |= ((xg >> mb) & _U64(1)) << b
        z |= ((zg >> mb) & _U64(1)) << b
    return LocalOperator._from_arrays(lo, x, z, coef)


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def spectral_norm(M, hermitian: bool | None = None) -> float:
    """Largest singular value of a dense or sparse matrix.

    ``hermitian=True`` skips the symmetry test and uses a Hermitian
    Lanczos solve; the caller guarantees the symmetry.
    """
    dim = M.shape[0]
    if dim <= 512:
        dense = M.toarray() if sp.issparse(M) else np.asarray(M)
        return float(np.linalg.norm(dense, 2)) if dim else 0.0
    if sp.issparse(M):
        if M.nnz == 0:
            return 0.0
        herm = hermitian if hermitian is not None else abs(M - M.getH()).max() == 0
    else:
        if not np.any(M):
            return 0.0
        herm = hermitian if hermitian is not None else np.array_equal(M, M.conj().T)
    if herm:
        val = spla.eigsh(M, k=1, which="LM", return_eigenvectors=False, tol=1e-14)
        return float(abs(val[0]))
    op = spla.LinearOperator(M.shape, matvec=lambda v: M.conj().T @ (M @ v), dtype=complex)
    val = spla.eigsh(op, k=1, which="LA", return_eigenvectors=False, tol=0)
    return float(np.sqrt(max(val[0].real, 0.0)))


def operator_norm(A: LocalOperator, dense_limit: int = DENSE_LIMIT) -> float:
    """Spectral norm of ``A`` on its support.

    Raises
    ------
    SupportTooLarge
        If the support has more than ``dense_limit`` sites.
    """
    supp = A.support
    if len(supp) > dense_limit:
        raise SupportTooLarge(f"support of {len(supp)} sites exceeds dense limit {dense_limit}")
    if A.is_zero():
        return 0.0
    if not supp:
        return float(abs(A.c[0]))
    return spectral_norm(to_sparse(A, supp))
