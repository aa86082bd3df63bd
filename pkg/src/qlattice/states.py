"""
Expectation functionals on the spin lattice.

``ProductGibbsState`` is the grand-canonical state with density matrix
proportional to ``exp(mu * M)`` on every finite box, which factorizes
over sites.  ``FiniteThermalState`` is the Gibbs state of a Hamiltonian on
a finite window, evaluated with dense matrices.
"""
from __future__ import annotations

from typing import Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import SupportOutsideWindow, SupportTooLarge
from .operators import DENSE_LIMIT, LocalOperator, _U64, _popcount, magnetization, to_sparse


class QuantumState(Protocol):
    def expect(self, A: LocalOperator) -> complex: ...


class ProductGibbsState:
    """Translation-invariant product state with single-site weight
    ``diag(e^mu, e^-mu) / (2 cosh mu)``.

    Expectations are exact: a Pauli string has expectation
    ``tanh(mu)^{#Z}`` if it contains only Z letters and 0 otherwise.
    """

    def __init__(self, mu: float = 0.0):
        self.mu = float(mu)
        self.s = float(np.tanh(self.mu))

    def __repr__(self):
        return f"ProductGibbsState(mu={self.mu})"

    def descriptor(self) -> dict:
        return {"kind": "product_gibbs", "mu": self.mu}

    def string_values(self, x, z) -> np.ndarray:
        """Expectations of the Pauli strings with masks ``(x, z)``."""
        vals = self.s ** _popcount(z).astype(float)
        return np.where(x == 0, vals, 0.0)

    def expect(self, A: LocalOperator) -> complex:
        if A.is_zero():
            return 0j
        return complex(np.sum(A.c * self.string_values(A.x, A.z)))

    def expect_product(self, A: LocalOperator, B: LocalOperator) -> complex:
        """``omega(A B)`` without forming the full product.

        Only string pairs with equal X parts can give a diagonal product, so
        terms are joined on their X masks.
        """
        if A.is_zero() or B.is_zero():
            return 0j
        _, x1, z1, x2, z2 = A._aligned(B)
        order = np.argsort(x2, kind="stable")
        xs = x2[order]
        lo = np.searchsorted(xs, x1, side="left")
        hi = np.searchsorted(xs, x1, side="right")
        counts = hi - lo
        if counts.sum() == 0:
            return 0j
        ia = np.repeat(np.arange(len(x1)), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ib = order[np.repeat(lo, counts) + offsets]
        xa, za, zb = x1[ia], z1[ia], z2[ib]
        z3 = za ^ zb
        # phase of P(xa,za) P(xa,zb) = i^e P(0, z3)
        e = (_popcount(xa & za) + _popcount(xa & zb) + 2 * _popcount(za & xa)) % 4
        phase = np.array([1.0, 1.0j, -1.0, -1.0j])[e]
        vals = self.s ** _popcount(z3).astype(float)
        return complex(np.sum(phase * A.c[ia] * B.c[ib] * vals))

    def diagonal(self, n: int) -> np.ndarray:
        """Diagonal of the density matrix on ``n`` sites, kron ordering."""
        w = np.array([np.exp(self.mu), np.exp(-self.mu)]) / (2 * np.cosh(self.mu))
        d = np.ones(1)
        for _ in range(n):
            d = np.kron(d, w)
        return d

    def density_matrix(self, sites: Sequence[int]) -> np.ndarray:
        return np.diag(self.diagonal(len(sites)))

    def expect_matrix(self, M, n: int) -> complex:
        """``Tr(rho M)`` for a matrix on ``n`` consecutive window sites."""
        d = M.diagonal() if sp.issparse(M) else np.diagonal(M)
        return complex(np.dot(self.diagonal(n), d))

    def connected(self, A: LocalOperator, B: LocalOperator) -> complex:
        return connected(self, A, B)


class FiniteThermalState:
    """Gibbs state ``exp(-beta H + mu M) / Z`` on a finite window.

    Parameters
    ----------
    sites : sequence of int
        Window sites, at most ``dense_limit`` of them.
    hamiltonian : LocalOperator or iterable of LocalOperator
        Terms are summed.  Must be supported in the window.
    beta, mu : float
    """

    def __init__(self, sites: Sequence[int], hamiltonian, beta: float = 1.0,
                 mu: float = 0.0, dense_limit: int = DENSE_LIMIT):
        self.sites = list(sites)
        if len(self.sites) > dense_limit:
            raise SupportTooLarge(f"window of {len(self.sites)} sites exceeds dense limit")
        if isinstance(hamiltonian, LocalOperator):
            H = hamiltonian
        else:
            H = LocalOperator.zero()
            for term in hamiltonian:
                H = H + term
        self._check_support(H)
        self.hamiltonian = H
        self.beta = float(beta)
        self.mu = float(mu)
        G = self.beta * H - self.mu * magnetization(self.sites)
        Gd = to_sparse(G, self.sites).toarray()
        Gd = 0.5 * (Gd + Gd.conj().T)
        evals, evecs = np.linalg.eigh(Gd)
        w = np.exp(-(evals - evals.min()))
        self._evals = evals
        self._evecs = evecs
        self.rho = (evecs * (w / w.sum())) @ evecs.conj().T
        if abs(np.trace(self.rho) - 1) > 1e-12:
            raise ValueError("density matrix is not normalised")
        if np.linalg.eigvalsh(self.rho).min() < -1e-12:
            raise ValueError("density matrix is not positive")

    def __repr__(self):
        return f"FiniteThermalState(sites={self.sites}, beta={self.beta}, mu={self.mu})"

    def descriptor(self) -> dict:
        return {"kind": "thermal", "window": self.sites, "beta": self.beta, "mu": self.mu}

    def _check_support(self, A: LocalOperator):
        outside = set(A.support) - set(self.sites)
        if outside:
            raise SupportOutsideWindow(f"sites {sorted(outside)} outside window")

    def matrix(self, A: LocalOperator) -> sp.csr_matrix:
        self._check_support(A)
        return to_sparse(A, self.sites)

    def expect(self, A: LocalOperator) -> complex:
        M = self.matrix(A)
        return complex(M.multiply(self.rho.T).sum())

    def imaginary_time(self, B: LocalOperator) -> np.ndarray:
        """Dense matrix of ``e^{-G} B e^{G}`` with ``G = beta H - mu M``."""
        Bd = self.matrix(B).toarray()
        V, E = self._evecs, self._evals
        Bt = V.conj().T @ Bd @ V
        Bt *= np.exp(-np.subtract.outer(E, E))
        return V @ Bt @ V.conj().T

    def connected(self, A: LocalOperator, B: LocalOperator) -> complex:
        return connected(self, A, B)


def expect(state: QuantumState, A: LocalOperator) -> complex:
    """Expectation value ``omega(A)``."""
    return state.expect(A)


def expect_product(state: QuantumState, A: LocalOperator, B: LocalOperator) -> complex:
    """``omega(A B)``; uses the pairwise join for product states."""
    if isinstance(state, ProductGibbsState):
        return state.expect_product(A, B)
    return state.expect(A @ B)


def connected(state: QuantumState, A: LocalOperator, B: LocalOperator) -> complex:
    """``(A, B) = omega(A^dag B) - omega(A^dag) omega(B)``.

    Conjugate-linear in the first argument.  Product states factorize
    exactly, so disjointly supported pairs give exactly 0.
    """
    if isinstance(state, ProductGibbsState) and not set(A.support) & set(B.support):
        return 0j
    Ad = A.adjoint()
    return expect_product(state, Ad, B) - state.expect(Ad) * state.expect(B)


def conditional_expectation(A: LocalOperator, X: Iterable[int],
                            rho: ProductGibbsState) -> LocalOperator:
    """Partial expectation of ``A`` in ``rho`` over all sites outside ``X``.

    The result is supported in ``X``.  With ``X`` empty it is ``rho(A)``
    times the identity.
    """
    X = set(int(s) for s in X)
    if A.is_zero():
        return A
    keep = 0
    for s in A.support:
        if s in X:
            keep |= 1 << (s - A.origin)
    keep_u = _U64(keep)
    out_x = A.x & ~keep_u
    out_z = A.z & ~keep_u
    factor = rho.string_values(out_x, out_z)
    return LocalOperator._from_arrays(A.origin, A.x & keep_u, A.z & keep_u, A.c * factor)


def kms_residual(state: FiniteThermalState, A: LocalOperator, B: LocalOperator) -> float:
    """``|omega(A tau_{i beta} B) - omega(B A)|`` on the state's window."""
    Ad = state.matrix(A).toarray()
    Bi = state.imaginary_time(B)
    lhs = np.sum(state.rho.T * (Ad @ Bi))
    rhs = state.expect(B @ A)
    return float(abs(lhs - rhs))


def state_from_descriptor(desc: dict, hamiltonian: LocalOperator | None = None):
    kind = desc.get("kind", "product_gibbs")
    if kind == "product_gibbs":
        return ProductGibbsState(desc.get("mu", 0.0))
    if kind == "thermal":
        if hamiltonian is None:
            raise ValueError("thermal state descriptor needs a Hamiltonian")
        window = desc["window"]
        sites = list(range(int(window[0]), int(window[1]) + 1))
        return FiniteThermalState(sites, hamiltonian, desc.get("beta", 1.0), desc.get("mu", 0.0))
    raise ValueError(f"unknown state kind {kind!r}")
