"""
Heisenberg-picture dynamics on finite windows of the chain.

A ``LindbladGenerator`` holds translation-invariant templates: Hamiltonian
density terms and jump operators, each anchored near site 0.  Placing the
templates on a ``Window`` (open interval or periodic ring) produces the
finite-volume generator

    L*(A) = i[H, A] + 1/2 sum_j ( L_j^dag [A, L_j] + [L_j^dag, A] L_j )

and its backward counterpart with ``H -> -H`` and ``L_j -> L_j^dag``.

Three engines evolve observables:

``"dense-exponential"``
    Exact.  Hamiltonian generators are diagonalized (block by block in
    magnetization sectors when possible, up to 12 sites); Lindblad
    generators use the sparse superoperator with ``expm_multiply``
    (up to 7 sites).
``"ode-rk4"``
    Classical RK4 on the Pauli-string representation.  Generator terms are
    applied only to strings whose support they touch, so locality is exact.
``"dense-rk4"``
    RK4 on dense matrices with sparse ``H`` and jumps, up to 12 sites.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ModelInvalid, StepSizeRejected, SupportOutsideWindow, SupportTooLarge,
                     TermBudgetExceeded, WindowTooLarge)
from .operators import (DENSE_LIMIT, LocalOperator, _U64, _commutator_arrays, _product_arrays,
                        commutator, from_dense, linear_combination, magnetization,
                        operator_norm, splus, sminus, sx, sy, sz, to_sparse, translate, wrap)
from .states import ProductGibbsState, conditional_expectation

METHODS = ("dense-exponential", "ode-rk4", "dense-rk4")
SUPEROPERATOR_LIMIT = 7
# sparse superoperator right-hand side for dense RK4 up to this many sites
RHS_SUPEROPERATOR_LIMIT = 9


# ---------------------------------------------------------------------------
# Windows and interactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """Consecutive sites ``start .. start + size - 1``, open or periodic."""

    start: int
    size: int
    periodic: bool = False

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("window must contain at least one site")

    @classmethod
    def ring(cls, size: int, start: int = 0) -> "Window":
        return cls(start, size, True)

    @classmethod
    def interval(cls, first: int, last: int) -> "Window":
        return cls(first, last - first + 1, False)

    @property
    def end(self) -> int:
        return self.start + self.size - 1

    @property
    def sites(self) -> list[int]:
        return list(range(self.start, self.start + self.size))

    def contains(self, A: LocalOperator) -> bool:
        return all(self.start <= s <= self.end for s in A.support)

    def check(self, A: LocalOperator):
        if not self.contains(A):
            raise SupportOutsideWindow(
                f"support {A.support} not inside window [{self.start}, {self.end}]")

    def fold(self, A: LocalOperator) -> LocalOperator:
        """Wrap onto the ring (identity for open windows that contain ``A``)."""
        if self.periodic:
            return wrap(A, self.start, self.size)
        self.check(A)
        return A

    def shift(self, A: LocalOperator, x: int) -> LocalOperator:
        """Translation by ``x`` inside the window (wrapping on rings)."""
        B = translate(A, x)
        return self.fold(B)

    def describe(self) -> dict:
        return {"start": self.start, "size": self.size,
                "boundary": "periodic" if self.periodic else "open"}


@dataclass(frozen=True)
class Interaction:
    """Nearest-neighbour interaction: a one-site template at site 0 and a
    two-site template on sites {0, 1}.  Both must be Hermitian."""

    one_site: LocalOperator = field(default_factory=LocalOperator.zero)
    two_site: LocalOperator = field(default_factory=LocalOperator.zero)

    def __post_init__(self):
        for name, op in (("one_site", self.one_site), ("two_site", self.two_site)):
            if not op.is_hermitian(atol=1e-14):
                raise ModelInvalid(f"{name} interaction term is not Hermitian")
        if not set(self.one_site.support) <= {0}:
            raise ModelInvalid("one_site template must act on site 0 only")
        if not set(self.two_site.support) <= {0, 1}:
            raise ModelInvalid("two_site template must act on sites {0, 1}")

    def templates(self) -> list[LocalOperator]:
        return [op for op in (self.one_site, self.two_site) if not op.is_zero()]


def xx_interaction(alpha: complex = 1.0, field: float = 0.0) -> Interaction:
    """``alpha s+_0 s-_1 + conj(alpha) s-_0 s+_1`` plus ``field * s3_0``."""
    two = alpha * (splus(0) @ sminus(1)) + np.conj(alpha) * (sminus(0) @ splus(1))
    return Interaction(field * sz(0), two)


def xyz_interaction(jx: float, jy: float, jz: float, h: float = 0.0) -> Interaction:
    """Heisenberg XYZ chain ``jx XX + jy YY + jz ZZ`` with field ``h Z``."""
    two = jx * (sx(0) @ sx(1)) + jy * (sy(0) @ sy(1)) + jz * (sz(0) @ sz(1))
    return Interaction(h * sz(0), two)


def place(template: LocalOperator, window: Window) -> list[LocalOperator]:
    """All translates of ``template`` that live in ``window``.

    On a ring every one of the ``size`` translates is kept (wrapped); on an
    open window only translates fully inside it.
    """
    supp = template.support
    if not supp:
        return []
    lo, hi = min(supp), max(supp)
    if window.periodic:
        if hi - lo >= window.size:
            raise WindowTooLarge("template wider than the ring")
        return [wrap(translate(template, window.start + k - lo), window.start, window.size)
                for k in range(window.size)]
    return [translate(template, x) for x in range(window.start - lo, window.end - hi + 1)]


def hamiltonian_window(phi: Interaction, window: Window) -> LocalOperator:
    """``H_window`` as the sum of all placed interaction terms."""
    terms = [op for t in phi.templates() for op in place(t, window)]
    return linear_combination(terms)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _as_direction(direction: str) -> str:
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    return direction


class LindbladGenerator:
    """Translation-invariant Lindblad generator on the chain.

    Parameters
    ----------
    hamiltonian : sequence of LocalOperator
        Hermitian density templates; ``H = sum_x translate(h, x)``.
    jumps : sequence of LocalOperator
        Jump operator templates ``L_j(0)``; every translate is a jump.
    """

    def __init__(self, hamiltonian: Iterable[LocalOperator] = (),
                 jumps: Iterable[LocalOperator] = ()):
        self.hamiltonian = [h for h in hamiltonian if not h.is_zero()]
        self.jumps = [L for L in jumps if not L.is_zero()]
        for h in self.hamiltonian:
            if not h.is_hermitian(atol=1e-14):
                raise ModelInvalid("Hamiltonian density is not Hermitian")

    @classmethod
    def from_interaction(cls, phi: Interaction, jumps: Iterable[LocalOperator] = ()):
        return cls(phi.templates(), jumps)

    @property
    def is_hamiltonian(self) -> bool:
        return not self.jumps

    @property
    def reach(self) -> int:
        """Largest template diameter."""
        spans = [max(t.support) - min(t.support) for t in self.hamiltonian + self.jumps
                 if t.support]
        return max(spans, default=0)

    def oriented(self, direction: str) -> tuple[list[LocalOperator], list[LocalOperator]]:
        """Templates rewritten so that both directions share the forward formula."""
        if _as_direction(direction) == "forward":
            return self.hamiltonian, self.jumps
        return [-h for h in self.hamiltonian], [L.adjoint() for L in self.jumps]

    def placed(self, window: Window, direction: str = "forward"):
        hs, Ls = self.oriented(direction)
        return ([op for h in hs for op in place(h, window)],
                [op for L in Ls for op in place(L, window)])

    def hamiltonian_on(self, window: Window) -> LocalOperator:
        return linear_combination(self.placed(window)[0])

    def matrices(self, window: Window, direction: str = "forward"):
        """Sparse ``H`` and jump matrices on the window (kron order)."""
        hs, Ls = self.placed(window, direction)
        sites = window.sites
        dim = 1 << len(sites)
        H = sp.csr_matrix((dim, dim), dtype=complex)
        for h in hs:
            H = H + to_sparse(h, sites)
        return H.tocsr(), [to_sparse(L, sites) for L in Ls]

    def apply(self, A: LocalOperator, direction: str = "forward",
              window: Window | None = None) -> LocalOperator:
        return lindblad_apply(A, direction, self, window)


def _select(A: LocalOperator, sites: Sequence[int]) -> LocalOperator:
    """Strings of ``A`` whose support meets ``sites``."""
    mask = 0
    for s in sites:
        b = s - A.origin
        if 0 <= b < 64:
            mask |= 1 << b
    if mask == 0:
        return LocalOperator.zero()
    sel = ((A.x | A.z) & _U64(mask)) != 0
    if not sel.any():
        return LocalOperator.zero()
    if sel.all():
        return A
    return LocalOperator._from_arrays(A.origin, A.x[sel], A.z[sel], A.c[sel])


class _FramedTerms:
    """Placed generator terms as raw bitmask arrays relative to a fixed frame.

    Applying the generator then needs a single canonicalization at the end,
    instead of one per elementary product.
    """

    def __init__(self, hs: Sequence[LocalOperator], Ls: Sequence[LocalOperator], origin: int):
        self.origin = origin
        self.hs = [self._framed(h) for h in hs]
        self.Ls = [(self._framed(L), self._framed(L.adjoint())) for L in Ls]

    def _framed(self, op: LocalOperator):
        shift = op.origin - self.origin
        if shift < 0 or shift + op.support_mask.bit_length() > 64:
            raise SupportTooLarge("generator term outside the 64-site frame")
        mask = _U64(op.support_mask << shift)
        return (op.x << _U64(shift), op.z << _U64(shift), op.c, mask)

    def apply(self, A: LocalOperator) -> LocalOperator:
        if A.is_zero():
            return A
        shift = A.origin - self.origin
        if A.is_scalar():
            return LocalOperator.zero()
        if shift < 0 or shift + A.support_mask.bit_length() > 64:
            raise SupportTooLarge("operator outside the 64-site frame")
        x = A.x << _U64(shift)
        z = A.z << _U64(shift)
        supp = x | z
        xs, zs, cs = [], [], []
        for hx, hz, hc, mask in self.hs:
            sel = (supp & mask) != 0
            if not sel.any():
                continue
            x3, z3, c3 = _commutator_arrays(hx, hz, hc, x[sel], z[sel], A.c[sel])
            xs.append(x3)
            zs.append(z3)
            cs.append(1j * c3)
        for (lx, lz, lc, mask), (dx, dz, dc, _) in self.Ls:
            sel = (supp & mask) != 0
            if not sel.any():
                continue
            ax, az, ac = x[sel], z[sel], A.c[sel]
            # 1/2 L^dag [A, L]
            x1, z1, c1 = _commutator_arrays(ax, az, ac, lx, lz, lc)
            x2, z2, c2 = _product_arrays(dx, dz, dc, x1, z1, c1)
            xs.append(x2)
            zs.append(z2)
            cs.append(0.5 * c2)
            # 1/2 [L^dag, A] L
            x1, z1, c1 = _commutator_arrays(dx, dz, dc, ax, az, ac)
            x2, z2, c2 = _product_arrays(x1, z1, c1, lx, lz, lc)
            xs.append(x2)
            zs.append(z2)
            cs.append(0.5 * c2)
        if not xs:
            return LocalOperator.zero()
        return LocalOperator._from_arrays(self.origin, np.concatenate(xs), np.concatenate(zs),
                                          np.concatenate(cs))


def lindblad_apply(A: LocalOperator, direction: str, gen: LindbladGenerator,
                   window: Window | None = None) -> LocalOperator:
    """One application of the Heisenberg generator.

    With ``window=None`` the generator of the infinite chain is used: only
    translates touching ``supp(A)`` contribute, all others vanish exactly.
    With a window, ``A`` must lie inside it and the window's placed terms
    are used (wrapping on rings).
    """
    hs, Ls = gen.oriented(direction)
    if window is None:
        supp = A.support
        if not supp:
            return LocalOperator.zero()
        lo, hi = min(supp), max(supp)
        ph, pL = [], []
        for temps, out in ((hs, ph), (Ls, pL)):
            for t in temps:
                ts = t.support
                if not ts:
                    continue
                for x in range(lo - max(ts), hi - min(ts) + 1):
                    out.append(translate(t, x))
        origin = min([op.origin for op in ph + pL] + [A.origin])
        return _FramedTerms(ph, pL, origin).apply(A)
    window.check(A)
    hs_p, Ls_p = gen.placed(window, direction)
    return _FramedTerms(hs_p, Ls_p, window.start).apply(A)


def _right(A: np.ndarray, X) -> np.ndarray:
    """Dense ``A @ X`` for sparse or dense ``X``."""
    return (X.T @ A.T).T if sp.issparse(X) else A @ X


def dense_generator_apply(A: np.ndarray, H, Ls, K=None) -> np.ndarray:
    """``i[H,A] + sum L^dag A L - 1/2 {K, A}`` with ``K = sum L^dag L``."""
    out = 1j * (H @ A - _right(A, H))
    if Ls:
        if K is None:
            K = sum((L.conj().T @ L for L in Ls), sp.csr_matrix(H.shape, dtype=complex))
        for L in Ls:
            out += L.conj().T @ _right(A, L)
        out -= 0.5 * (K @ A + _right(A, K))
    return out


def superoperator(gen: LindbladGenerator, window: Window, direction: str = "forward",
                  limit: int = SUPEROPERATOR_LIMIT):
    """Sparse matrix of the generator acting on row-major ``vec(A)``.

    Uses ``vec(X A Y) = (X kron Y^T) vec(A)``.
    """
    if window.size > limit:
        raise WindowTooLarge(f"superoperator limited to {limit} sites")
    H, Ls = gen.matrices(window, direction)
    dim = H.shape[0]
    eye = sp.identity(dim, dtype=complex, format="csr")
    S = 1j * (sp.kron(H, eye) - sp.kron(eye, H.T))
    for L in Ls:
        Ld = L.conj().T
        K = Ld @ L
        S = S + sp.kron(Ld, L.T) - 0.5 * (sp.kron(K, eye) + sp.kron(eye, K.T))
    return S.tocsr()


def schrodinger_apply(rho: np.ndarray, gen: LindbladGenerator, window: Window) -> np.ndarray:
    """Schrodinger-picture generator ``-i[H,rho] + sum (L rho L^dag - 1/2 {L^dag L, rho})``.

    Built directly from the matrices, independently of the Heisenberg code
    path, so that duality can be checked against it.
    """
    H, Ls = gen.matrices(window, "forward")
    H = H.toarray()
    out = -1j * (H @ rho - rho @ H)
    for L in Ls:
        L = L.toarray()
        Ld = L.conj().T
        out += L @ rho @ Ld - 0.5 * (Ld @ L @ rho + rho @ Ld @ L)
    return out


# ---------------------------------------------------------------------------
# Spectral engine for Hamiltonian dynamics
# ---------------------------------------------------------------------------

class HamiltonianSpectrum:
    """Eigendecomposition of a window Hamiltonian, blocked by magnetization
    sector when the Hamiltonian conserves it.

    Operators in the eigenbasis are stored as dictionaries of dense blocks
    keyed by sector pairs.
    """

    def __init__(self, H: LocalOperator, window: Window):
        self.window = window
        n = window.size
        if n > DENSE_LIMIT:
            raise WindowTooLarge(f"dense Hamiltonian limited to {DENSE_LIMIT} sites")
        Hs = to_sparse(H, window.sites)
        dim = 1 << n
        self.conserves_m = commutator(H, magnetization(window.sites)).is_zero()
        basis = np.arange(dim, dtype=np.uint64)
        key = np.bitwise_count(basis).astype(np.int64) if self.conserves_m else np.zeros(dim, int)
        self.perm = np.argsort(key, kind="stable")
        keys = key[self.perm]
        bounds = np.flatnonzero(np.diff(keys)) + 1
        self.slices = [slice(a, b) for a, b in zip(np.r_[0, bounds], np.r_[bounds, dim])]
        Hp = Hs[self.perm][:, self.perm].tocsr()
        self.energies, self.vectors = [], []
        for sl in self.slices:
            blk = Hp[sl, sl].toarray()
            e, v = np.linalg.eigh(0.5 * (blk + blk.conj().T))
            self.energies.append(e)
            self.vectors.append(v)
        self.dim = dim

    def to_eigen(self, M) -> dict:
        Mp = (M if sp.issparse(M) else sp.csr_matrix(M))[self.perm][:, self.perm].tocsr()
        out = {}
        for i, si in enumerate(self.slices):
            row = Mp[si]
            for j, sj in enumerate(self.slices):
                blk = row[:, sj]
                if blk.nnz == 0:
                    continue
                out[(i, j)] = self.vectors[i].conj().T @ (blk @ self.vectors[j])
        return out

    def phases(self, i: int, j: int, t: float) -> np.ndarray:
        return np.exp(1j * t * np.subtract.outer(self.energies[i], self.energies[j]))

    def evolve_eigen(self, blocks: dict, t: float) -> dict:
        return {k: b * self.phases(k[0], k[1], t) for k, b in blocks.items()}

    def from_eigen(self, blocks: dict) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for (i, j), b in blocks.items():
            out[self.slices[i], self.slices[j]] = self.vectors[i] @ b @ self.vectors[j].conj().T
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.dim)
        return out[inv][:, inv]

    def evolve_matrix(self, M, t: float) -> np.ndarray:
        return self.from_eigen(self.evolve_eigen(self.to_eigen(M), t))

    def diagonal_weights(self, state) -> np.ndarray | None:
        """Eigenbasis diagonal of a product Gibbs state, if it commutes with H."""
        if not isinstance(state, ProductGibbsState):
            return None
        if not self.conserves_m and state.mu != 0.0:
            return None
        d = state.diagonal(self.window.size)[self.perm]
        return d

    def correlations(self, A, Bs: Sequence, weights: np.ndarray, times) -> np.ndarray:
        """``Tr(rho e^{iHt} A e^{-iHt} B_j)`` for diagonal ``rho`` in the eigenbasis.

        Contributions are grouped by Bohr frequency (rounded to 1e-10) before
        the time loop.
        """
        At = self.to_eigen(A)
        Bt = [self.to_eigen(B) for B in Bs]
        omegas, gvals = [], []
        for (i, j), a in At.items():
            wi = weights[self.slices[i]]
            om = np.round(np.subtract.outer(self.energies[i], self.energies[j]).ravel(), 10)
            g = np.zeros((len(Bs), om.size), dtype=complex)
            for k, bt in enumerate(Bt):
                b = bt.get((j, i))
                if b is not None:
                    g[k] = (wi[:, None] * a * b.T).ravel()
            # bin within the block first to bound memory
            uniq, G = _bin_frequencies(om, g)
            omegas.append(uniq)
            gvals.append(G)
        del At, Bt
        times = np.asarray(times, dtype=float)
        if not omegas:
            return np.zeros((len(times), len(Bs)), dtype=complex)
        uniq, G = _bin_frequencies(np.concatenate(omegas), np.concatenate(gvals, axis=1))
        out = np.empty((len(times), len(Bs)), dtype=complex)
        chunk = max(1, (1 << 24) // max(1, len(uniq)))
        for s in range(0, len(times), chunk):
            ph = np.exp(1j * np.outer(times[s:s + chunk], uniq))
            out[s:s + chunk] = ph @ G.T
        return out

    def weighted_sum(self, blocks: dict, times, weights) -> dict:
        """``sum_j weights[j] * evolve_eigen(blocks, times[j])``."""
        times = np.asarray(times, dtype=float)
        weights = np.asarray(weights, dtype=complex)
        out = {}
        for (i, j), b in blocks.items():
            om = np.subtract.outer(self.energies[i], self.energies[j])
            acc = np.zeros_like(om, dtype=complex)
            for t, w in zip(times, weights):
                acc += w * np.exp(1j * t * om)
            out[(i, j)] = b * acc
        return out


def _bin_frequencies(om: np.ndarray, g: np.ndarray):
    """Sum the columns of ``g`` that share a (rounded) frequency."""
    uniq, inv = np.unique(om, return_inverse=True)
    G = np.zeros((g.shape[0], len(uniq)), dtype=complex)
    for k in range(g.shape[0]):
        G[k] = (np.bincount(inv, weights=g[k].real, minlength=len(uniq))
                + 1j * np.bincount(inv, weights=g[k].imag, minlength=len(uniq)))
    return uniq, G


# ---------------------------------------------------------------------------
# Evolver
# ---------------------------------------------------------------------------

def _rk4_step(f: Callable, y, h: float, combine: Callable):
    k1 = f(y)
    k2 = f(combine([y, k1], [1.0, h / 2]))
    k3 = f(combine([y, k2], [1.0, h / 2]))
    k4 = f(combine([y, k3], [1.0, h]))
    return combine([y, k1, k2, k3, k4], [1.0, h / 6, h / 3, h / 3, h / 6])


def _dense_combine(arrs, coeffs):
    out = arrs[0] * coeffs[0]
    for a, c in zip(arrs[1:], coeffs[1:]):
        out = out + c * a
    return out


def _pair_combine(base):
    def combine(ys, coeffs):
        return tuple(base([y[k] for y in ys], coeffs) for k in range(len(ys[0])))
    return combine


def _size(y) -> float:
    if isinstance(y, LocalOperator):
        return y.max_abs_coefficient()
    return float(np.abs(y).max()) if y.size else 0.0


def _difference(a, b) -> float:
    if isinstance(a, LocalOperator):
        return (a - b).max_abs_coefficient()
    return float(np.abs(a - b).max())


class Evolver:
    """Time evolution of observables on a fixed window.

    Parameters
    ----------
    generator : LindbladGenerator
    window : Window
    method : {"dense-exponential", "ode-rk4", "dense-rk4"}
    dt : float
        Largest RK4 step.
    direction : {"forward", "backward"}
        Forward is the Heisenberg semigroup of ``L*``; backward uses ``L``.
    step_tol : float
        The first RK4 step is repeated with two half steps; if the two
        results differ by more than ``step_tol`` (relative to the size of
        the observable) ``StepSizeRejected`` is raised.  The estimate is
        kept in ``last_step_error``.
    term_budget : int
        Maximal number of Pauli strings for ``"ode-rk4"``.
    prune : float
        Optional magnitude pruning after each ``"ode-rk4"`` step (default 0).
    """

    def __init__(self, generator: LindbladGenerator, window: Window,
                 method: str = "ode-rk4", dt: float = 0.01, direction: str = "forward",
                 dense_limit: int = DENSE_LIMIT, step_tol: float = 1e-8,
                 term_budget: int = 200_000, prune: float = 0.0):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.generator = generator
        self.window = window
        self.method = method
        self.dt = float(dt)
        self.direction = _as_direction(direction)
        self.dense_limit = dense_limit
        self.step_tol = step_tol
        self.term_budget = term_budget
        self.prune = prune
        self.last_step_error = None
        self._placed = generator.placed(window, self.direction)
        self._framed = _FramedTerms(*self._placed, window.start)
        self._mats = None
        self._spectrum = None
        self._superop = None
        self._rhs_superop = None
        if method != "ode-rk4" and window.size > dense_limit:
            raise WindowTooLarge(f"{method} limited to {dense_limit} sites")
        if method == "dense-exponential" and not generator.is_hamiltonian \
                and window.size > SUPEROPERATOR_LIMIT:
            raise WindowTooLarge(
                f"dense superoperator limited to {SUPEROPERATOR_LIMIT} sites")

    def describe(self) -> dict:
        return {"window": self.window.describe(), "method": self.method, "dt": self.dt,
                "direction": self.direction, "prune": self.prune,
                "step_tol": self.step_tol, "last_step_error": self.last_step_error}

    # ---- right-hand sides ----
    def apply(self, A: LocalOperator) -> LocalOperator:
        """Generator applied once, on this window."""
        return self._framed.apply(A)

    def _pauli_rhs(self, A: LocalOperator) -> LocalOperator:
        if A.n_terms > self.term_budget:
            raise TermBudgetExceeded(f"{A.n_terms} Pauli strings exceed the budget")
        out = self.apply(A)
        if out.n_terms > self.term_budget:
            raise TermBudgetExceeded(f"{out.n_terms} Pauli strings exceed the budget")
        return out

    def matrices(self):
        if self._mats is None:
            H, Ls = self.generator.matrices(self.window, self.direction)
            K = sum((L.conj().T @ L for L in Ls), sp.csr_matrix(H.shape, dtype=complex))
            self._mats = (H, Ls, K.tocsr())
        return self._mats

    def _dense_rhs(self, A: np.ndarray) -> np.ndarray:
        if self.window.size <= RHS_SUPEROPERATOR_LIMIT and not self.generator.is_hamiltonian:
            if self._rhs_superop is None:
                self._rhs_superop = superoperator(self.generator, self.window, self.direction,
                                                  RHS_SUPEROPERATOR_LIMIT)
            return (self._rhs_superop @ A.ravel()).reshape(A.shape)
        H, Ls, K = self.matrices()
        return dense_generator_apply(A, H, Ls, K)

    def spectrum(self) -> HamiltonianSpectrum:
        if self._spectrum is None:
            H = linear_combination(self._placed[0])
            self._spectrum = HamiltonianSpectrum(H, self.window)
        return self._spectrum

    def superoperator(self):
        if self._superop is None:
            self._superop = superoperator(self.generator, self.window, self.direction)
        return self._superop

    # ---- stepping ----
    def _stepper(self, dense: bool):
        if dense:
            return self._dense_rhs, _dense_combine
        prune = self.prune

        def combine(ops, coeffs):
            return linear_combination(ops, coeffs, prune=prune)
        return self._pauli_rhs, combine

    def _march(self, y, times, rhs, combine, sample: Callable):
        """Integrate from t=0 through the sorted ``times``, sampling each."""
        out = []
        t_now = 0.0
        checked = self.step_tol is None
        for t in times:
            if t < t_now - 1e-12:
                raise ValueError("times must be sorted and nonnegative")
            span = t - t_now
            n = int(math.ceil(span / self.dt - 1e-9)) if span > 0 else 0
            for _ in range(n):
                h = span / n
                if not checked:
                    y = self._checked_step(rhs, y, h, combine)
                    checked = True
                else:
                    y = _rk4_step(rhs, y, h, combine)
            t_now = t
            out.append(sample(y))
        return out

    def _checked_step(self, rhs, y, h, combine):
        full = _rk4_step(rhs, y, h, combine)
        half = _rk4_step(rhs, _rk4_step(rhs, y, h / 2, combine), h / 2, combine)
        head = half[0] if isinstance(half, tuple) else half
        ref = full[0] if isinstance(full, tuple) else full
        y0 = y[0] if isinstance(y, tuple) else y
        err = _difference(head, ref) / max(_size(y0), 1e-300)
        self.last_step_error = err
        if err > self.step_tol:
            raise StepSizeRejected(
                f"RK4 step {h:g} has relative error estimate {err:.2e} > {self.step_tol:g}")
        return half

    def _check_input(self, A: LocalOperator):
        self.window.check(A)

    # ---- public API ----
    def trajectory(self, A: LocalOperator, times: Sequence[float]) -> list[LocalOperator]:
        """Evolved observable at each of the sorted nonnegative ``times``."""
        if self.method == "ode-rk4":
            self._check_input(A)
            rhs, combine = self._stepper(False)
            return self._march(A, list(times), rhs, combine, lambda y: y)
        sites = self.window.sites
        return [from_dense(M, sites) for M in self.matrix_trajectory(A, times)]

    def evolve(self, A: LocalOperator, t: float) -> LocalOperator:
        if t < 0:
            if self.method == "dense-exponential" and self.generator.is_hamiltonian:
                return from_dense(self.spectrum().evolve_matrix(
                    to_sparse(A, self.window.sites), t), self.window.sites)
            raise ValueError("semigroup evolution needs t >= 0")
        return self.trajectory(A, [t])[0]

    def matrix_trajectory(self, A, times: Sequence[float]) -> list[np.ndarray]:
        """Dense matrices of the evolved observable at each sample time."""
        sites = self.window.sites
        if isinstance(A, LocalOperator):
            self._check_input(A)
            M = to_sparse(A, sites)
        else:
            M = sp.csr_matrix(A)
        times = list(times)
        if self.method == "ode-rk4":
            return [to_sparse(op, sites).toarray() for op in self.trajectory(A, times)]
        if self.method == "dense-exponential":
            if self.generator.is_hamiltonian:
                spec = self.spectrum()
                blocks = spec.to_eigen(M)
                return [spec.from_eigen(spec.evolve_eigen(blocks, t)) for t in times]
            S = self.superoperator()
            dim = M.shape[0]
            v = M.toarray().ravel()
            out, t_now = [], 0.0
            for t in times:
                if t > t_now:
                    v = spla.expm_multiply(S * (t - t_now), v)
                    t_now = t
                out.append(v.reshape(dim, dim).copy())
            return out
        rhs, combine = self._stepper(True)
        return self._march(M.toarray(), times, rhs, combine, lambda y: y.copy())

    def integrate(self, A: LocalOperator, times: Sequence[float], dense: bool | None = None):
        """Running integrals ``int_0^t tau_s(A) ds`` at the sample ``times``.

        Solved as the augmented linear system ``X' = gen(X), Y' = X`` with RK4,
        which is as accurate as the evolution itself.  Returns a list of
        ``(X(t), Y(t))`` pairs; matrices unless the method is ``"ode-rk4"``.
        """
        self._check_input(A)
        if dense is None:
            dense = self.method != "ode-rk4"
        if dense:
            y0 = to_sparse(A, self.window.sites).toarray()
            zero = np.zeros_like(y0)
        else:
            y0, zero = A, LocalOperator.zero()
        rhs, combine = self._stepper(dense)

        def aug(y):
            return (rhs(y[0]), y[0])
        return self._march((y0, zero), list(times), aug, _pair_combine(combine), lambda y: y)

    def correlations(self, A: LocalOperator, Bs: Sequence[LocalOperator], state,
                     times: Sequence[float]) -> np.ndarray:
        """``omega(tau_t(A) B_j)`` for each sample time and each ``B_j``.

        Returns an array of shape ``(len(times), len(Bs))``.
        """
        times = list(times)
        sites = self.window.sites
        for B in Bs:
            self._check_input(B)
        if self.method == "dense-exponential" and self.generator.is_hamiltonian:
            spec = self.spectrum()
            w = spec.diagonal_weights(state)
            if w is not None:
                self._check_input(A)
                return spec.correlations(to_sparse(A, sites), [to_sparse(B, sites) for B in Bs],
                                         w, times)
        if self.method == "ode-rk4":
            from .states import expect_product
            traj = self.trajectory(A, times)
            return np.array([[expect_product(state, At, B) for B in Bs] for At in traj],
                            dtype=complex).reshape(len(times), len(Bs))
        mats = self.matrix_trajectory(A, times)
        return np.array([[matrix_expect_product(state, M, B, sites) for B in Bs]
                         for M in mats], dtype=complex).reshape(len(times), len(Bs))


def matrix_expect_product(state, M: np.ndarray, B, sites: Sequence[int]) -> complex:
    """``omega(M B)`` for a dense window matrix ``M``."""
    Bs = B if sp.issparse(B) else (to_sparse(B, sites) if isinstance(B, LocalOperator)
                                    else sp.csr_matrix(B))
    Bc = Bs.tocoo()
    if isinstance(state, ProductGibbsState):
        d = state.diagonal(len(sites))
        # Tr(rho M B) = sum_{i,k} d_i M_ik B_ki
        return complex(np.sum(d[Bc.col] * M[Bc.col, Bc.row] * Bc.data))
    rho = state.rho
    return complex(np.sum((rho @ M)[Bc.col, Bc.row] * Bc.data))


def matrix_expect(state, M: np.ndarray, sites: Sequence[int]) -> complex:
    if isinstance(state, ProductGibbsState):
        return complex(np.dot(state.diagonal(len(sites)), np.diagonal(M)))
    return complex(np.sum(state.rho.T * M))


# ---------------------------------------------------------------------------
# Convenience wrappers
# ---------------------------------------------------------------------------

def evolve_hamiltonian(A: LocalOperator, t: float, H: LocalOperator | Interaction,
                       window: Window) -> LocalOperator:
    """``e^{itH} A e^{-itH}`` on the window by exact diagonalization."""
    if isinstance(H, Interaction):
        H = hamiltonian_window(H, window)
    window.check(A)
    spec = HamiltonianSpectrum(H, window)
    return from_dense(spec.evolve_matrix(to_sparse(A, window.sites), t), window.sites)


def evolve_lindblad(A: LocalOperator, t: float, direction: str, evolver: Evolver) -> LocalOperator:
    """Semigroup evolution for ``t >= 0`` in the requested direction."""
    if t < 0:
        raise ValueError("semigroup evolution needs t >= 0")
    if evolver.direction != direction:
        evolver = Evolver(evolver.generator, evolver.window, evolver.method, evolver.dt,
                          direction, evolver.dense_limit, evolver.step_tol,
                          evolver.term_budget, evolver.prune)
    return evolver.evolve(A, t)


def fatten(sites: Iterable[int], r: int) -> list[int]:
    sites = list(sites)
    if not sites:
        return []
    return list(range(min(sites) - r, max(sites) + r + 1))


def localize(A_evolved: LocalOperator, base_support: Iterable[int], r: int,
             rho: ProductGibbsState, dense_limit: int = DENSE_LIMIT):
    """Conditional expectation onto ``base_support`` fattened by ``r`` sites.

    Returns the localized operator and the measured norm of the error.
    """
    if r < 0:
        raise ValueError("r must be nonnegative")
    region = fatten(base_support, r)
    local = conditional_expectation(A_evolved, region, rho)
    diff = A_evolved - local
    return local, operator_norm(diff, dense_limit)


def ring_translation_indices(n: int, x: int) -> np.ndarray:
    """Basis permutation ``perm`` with ``translate(M)[i, j] = M[perm[i], perm[j]]``
    for a cyclic shift of ``n`` sites by ``x`` (kron ordering)."""
    dim = 1 << n
    idx = np.arange(dim)
    bits = (idx[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    # new site p carries what old site p - x carried
    old = bits[:, (np.arange(n) + x) % n]
    return (old << (n - 1 - np.arange(n))[None, :]).sum(axis=1)


def ring_translate_matrix(M: np.ndarray, x: int, n: int) -> np.ndarray:
    """Dense matrix of ``translate(A, x)`` on a ring of ``n`` sites."""
    x %= n
    if x == 0:
        return M
    perm = ring_translation_indices(n, x)
    return M[np.ix_(perm, perm)]
