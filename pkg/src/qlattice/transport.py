"""
Ergodicity and hydrodynamics experiments.

Ray averages follow an observable along the ray ``x = floor(v t)`` and
average its correlation with a fixed observable over time.  Extensive
quantities are represented by their densities; their inner product is
``<A, B>_k = sum_x e^{ikx} (A(x), B)`` with the connected correlation
``(A, B) = omega(A^dag B) - omega(A^dag) omega(B)``.  A charge at
frequency ``f`` and wavenumber ``k`` is an extensive quantity
``Q = sum_x e^{-ikx} q(x)`` with ``tau_t Q = e^{-ift} Q``, i.e.
``L*(Q) + i f Q = 0``.

All time integrals are trapezoid sums on the uniform grid ``t_j = j dt``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import (Evolver, LindbladGenerator, Window, matrix_expect,
                       ring_translate_matrix)
from .errors import (DegenerateGram, ModelInvalid, NoChargesFound, SupportOutsideWindow,
                     WavenumberMismatch)
from .operators import (LocalOperator, identity, linear_combination, sz, to_sparse,
                        translate, wrap)
from .states import ProductGibbsState, connected

GRAM_PSD_TOL = 1e-10
PINV_CUTOFF = 1e-10
CHARGE_TOL = 1e-8


# ---------------------------------------------------------------------------
# Sampling plans and helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RayPlan:
    """Sampling plan for averages along the ray ``x = direction * floor(v t)``.

    Attributes
    ----------
    v : float
        Speed in sites per unit time.
    direction : int
        +1 or -1.
    T_max : float
    dt : float
        Sample spacing; ``T_max`` must be a multiple of it.
    k, f : float
        Wavenumber and frequency of the oscillatory weight
        ``exp(i (k v direction - f) t)``.
    """

    v: float
    direction: int = 1
    T_max: float = 1.0
    dt: float = 0.02
    k: float = 0.0
    f: float = 0.0

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if not self.T_max > 0 or not self.dt > 0:
            raise ValueError("T_max and dt must be positive")
        n = round(self.T_max / self.dt)
        if abs(n * self.dt - self.T_max) > 1e-9 * self.T_max:
            raise ValueError("T_max must be a multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.T_max / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def phase_rate(self) -> float:
        return self.k * self.v * self.direction - self.f

    def displacements(self, times=None) -> np.ndarray:
        """``direction * floor(v t)``; a 1e-9 guard absorbs rounding at integers."""
        t = self.times if times is None else np.asarray(times, dtype=float)
        return self.direction * np.floor(self.v * t + 1e-9).astype(int)

    def with_dt(self, dt: float) -> "RayPlan":
        return RayPlan(self.v, self.direction, self.T_max, dt, self.k, self.f)


def trapezoid_weights(n: int, dt: float) -> np.ndarray:
    w = np.full(n + 1, dt)
    w[0] = w[-1] = dt / 2
    if n == 0:
        w[:] = 0.0
    return w


def running_average(values: np.ndarray, dt: float) -> np.ndarray:
    """Cesaro averages ``(1/T_j) int_0^{T_j}`` by the trapezoid rule.

    The entry at ``T = 0`` is the integrand itself.
    """
    values = np.asarray(values)
    out = np.empty_like(values, dtype=complex)
    out[0] = values[0]
    if len(values) > 1:
        integral = np.cumsum(0.5 * dt * (values[1:] + values[:-1]), axis=0)
        T = dt * np.arange(1, len(values))
        out[1:] = integral / T.reshape((-1,) + (1,) * (values.ndim - 1))
    return out


def _ring_offsets(n: int, radius: int | None) -> np.ndarray:
    """Each ring site once, as offsets in ``(-n/2, n/2]``, cut at ``radius``."""
    xs = np.arange(-((n - 1) // 2), n // 2 + 1)
    if radius is not None:
        xs = xs[np.abs(xs) <= radius]
    return xs


def _fits(window: Window, op: LocalOperator, margin: int) -> bool:
    supp = op.support
    if not supp:
        return True
    return min(supp) - window.start >= margin and window.end - max(supp) >= margin


def _open_translate(window: Window, A: LocalOperator, x: int, margin: int) -> LocalOperator | None:
    op = translate(A, x)
    return op if _fits(window, op, margin) else None


# ---------------------------------------------------------------------------
# Ray averages
# ---------------------------------------------------------------------------

@dataclass
class RaySeries:
    """Running ray average and its ingredients."""

    times: np.ndarray
    average: np.ndarray
    integrand: np.ndarray
    target: complex
    displacements: np.ndarray
    truncated_at: float | None = None
    metadata: dict = field(default_factory=dict)

    def deviation(self) -> np.ndarray:
        return np.abs(self.average - self.target)

    def at(self, T: float) -> complex:
        j = int(np.argmin(np.abs(self.times - T)))
        if abs(self.times[j] - T) > 1e-9:
            raise ValueError(f"T={T} is not a sample time")
        return complex(self.average[j])

    def to_rows(self):
        return [(float(t), int(d), complex(g), complex(a)) for t, d, g, a
                in zip(self.times, self.displacements, self.integrand, self.average)]


def _ray_integrand(A, B, plan: RayPlan, state, evolver: Evolver, margin: int, on_exit: str):
    """Samples ``omega(iota_{d(t)} tau_t(A) B)``; returns ``(values, n_valid)``."""
    window = evolver.window
    times = plan.times
    disp = plan.displacements(times)
    if window.periodic:
        # translation covariance on the ring: omega(iota_d(X) B) = omega(X iota_{-d} B)
        n = window.size
        uniq = sorted(set(int(d) % n for d in disp))
        Bs = [window.shift(B, -d) for d in uniq]
        C = evolver.correlations(A, Bs, state, times)
        col = {d: i for i, d in enumerate(uniq)}
        vals = np.array([C[j, col[int(d) % n]] for j, d in enumerate(disp)])
        return vals, len(times)
    if not _fits(window, B, margin):
        raise SupportOutsideWindow("B does not fit the window with the requested margin")
    vals = np.zeros(len(times), dtype=complex)
    n_valid = len(times)
    for d in sorted(set(disp.tolist()), key=lambda d: abs(d)):
        Ad = _open_translate(window, A, int(d), margin)
        idx = np.flatnonzero(disp == d)
        if Ad is None:
            if on_exit == "raise":
                raise SupportOutsideWindow(f"translate by {d} leaves the window bulk")
            n_valid = min(n_valid, int(idx[0]))
            continue
        vals[idx] = evolver.correlations(Ad, [B], state, times[idx])[:, 0]
    return vals, n_valid


def ray_average(A: LocalOperator, B: LocalOperator, plan: RayPlan, state, evolver: Evolver,
                margin: int = 0, on_exit: str = "raise") -> RaySeries:
    """Running average of ``e^{i(kv-f)t} omega(iota_{floor(vt)} tau_t(A) B)``.

    On a ring the translate is applied to ``B`` instead, so one evolution of
    ``A`` serves every displacement.  On an open window each displaced copy
    is evolved separately; copies closer than ``margin`` sites to the edge
    either raise ``SupportOutsideWindow`` (``on_exit="raise"``) or cut the
    series at the first such time (``on_exit="truncate"``).

    The target is ``omega(A) omega(B)`` for a vanishing phase rate and 0
    otherwise.
    """
    if on_exit not in ("raise", "truncate"):
        raise ValueError("on_exit must be 'raise' or 'truncate'")
    vals, n_valid = _ray_integrand(A, B, plan, state, evolver, margin, on_exit)
    times = plan.times[:n_valid]
    weighted = vals[:n_valid]
    rate = plan.phase_rate
    if rate != 0.0:
        weighted = weighted * np.exp(1j * rate * times)
    target = state.expect(A) * state.expect(B) if rate == 0.0 else 0j
    meta = {"plan": plan.__dict__.copy(), "window": evolver.window.describe(),
            "method": evolver.method, "margin": margin}
    return RaySeries(times, running_average(weighted, plan.dt), weighted, complex(target),
                     plan.displacements(times),
                     None if n_valid == len(plan.times) else float(plan.times[n_valid]), meta)


def ray_moment(A: LocalOperator, n: int, plan: RayPlan, state, evolver: Evolver,
               at: Sequence[float] | None = None, margin: int = 0):
    """``T^-n omega(Y_T^n)`` with ``Y_T = int_0^T e^{i(kv-f)t} iota_{floor(vt)} tau_t(A) dt``.

    Returns a complex number at ``T_max``, or an array over the times ``at``.
    Dense engines form ``Y_T`` as a window matrix; ``"ode-rk4"`` sums Pauli
    operators.
    """
    if not 1 <= n <= 4:
        raise ValueError("moment order must be between 1 and 4")
    Ts = [plan.T_max] if at is None else list(at)
    window = evolver.window
    sites = window.sites
    times = plan.times
    disp = plan.displacements(times)
    rate = plan.phase_rate
    phase = np.exp(1j * rate * times) if rate != 0.0 else np.ones(len(times))
    if not window.periodic:
        for d in set(disp.tolist()):
            if _open_translate(window, A, int(d), margin) is None:
                raise SupportOutsideWindow(f"translate by {d} leaves the window bulk")
    dense = evolver.method != "ode-rk4"
    spectral = (dense and evolver.method == "dense-exponential"
                and evolver.generator.is_hamiltonian)
    groups = sorted(set(disp.tolist()))
    if window.periodic:
        base = {0: A}
    else:
        base = {d: translate(A, d) for d in groups}
    if spectral:
        spec = evolver.spectrum()
        blocks = {d: spec.to_eigen(to_sparse(op, sites)) for d, op in base.items()}
    else:
        trajs = {d: (evolver.matrix_trajectory(op, times) if dense
                     else evolver.trajectory(op, times)) for d, op in base.items()}
    out = []
    for T in Ts:
        J = int(round(T / plan.dt))
        if J < 1 or J > plan.n_steps or abs(J * plan.dt - T) > 1e-9:
            raise ValueError(f"T={T} is not a positive sample time")
        w = trapezoid_weights(J, plan.dt) * phase[:J + 1]
        Y = None
        for d in groups:
            idx = np.flatnonzero(disp[:J + 1] == d)
            if len(idx) == 0:
                continue
            key = 0 if window.periodic else d
            if spectral:
                part = spec.from_eigen(spec.weighted_sum(blocks[key], times[idx], w[idx]))
            elif dense:
                part = sum(w[i] * trajs[key][i] for i in idx)
            else:
                part = linear_combination([trajs[key][i] for i in idx], w[idx])
            if window.periodic:
                part = (ring_translate_matrix(part, int(d), window.size) if dense
                        else window.shift(part, int(d)))
            Y = part if Y is None else Y + part
        if dense:
            P = np.linalg.matrix_power(Y, n) if n > 1 else Y
            val = matrix_expect(state, P, sites)
        else:
            P = Y
            for _ in range(n - 1):
                P = P @ Y
            val = state.expect(P)
        out.append(val / T ** n)
    return complex(out[0]) if at is None else np.array(out, dtype=complex)


# ---------------------------------------------------------------------------
# Extensive quantities
# ---------------------------------------------------------------------------

@dataclass
class ExtensiveVector:
    """Extensive quantity ``sum_x e^{-ikx} density(x)`` truncated at ``|x| <= R``."""

    density: LocalOperator
    k: float = 0.0
    R: int = 8


def extensive_inner(a: ExtensiveVector, b: ExtensiveVector, state,
                    return_tail: bool = False):
    """``<a, b>_k = sum_{|x| <= R} e^{ikx} (a(x), b)``.

    ``R`` is the smaller of the two truncation radii.  With
    ``return_tail=True`` the magnitude of the outermost shell ``|x| = R`` is
    returned as well, as a truncation estimate.
    """
    if not math.isclose(a.k, b.k, rel_tol=0.0, abs_tol=1e-12):
        raise WavenumberMismatch(f"wavenumbers {a.k} and {b.k} differ")
    R = min(a.R, b.R)
    total = 0j
    tail = 0.0
    for x in range(-R, R + 1):
        term = np.exp(1j * a.k * x) * connected(state, translate(a.density, x), b.density)
        total += term
        if abs(x) == R:
            tail += abs(term)
    return (complex(total), float(tail)) if return_tail else complex(total)


def gram_matrix(densities: Sequence[LocalOperator], k: float, R: int, state) -> np.ndarray:
    vecs = [ExtensiveVector(q, k, R) for q in densities]
    n = len(vecs)
    G = np.zeros((n, n), dtype=complex)
    for i in range(n):
        for j in range(i, n):
            G[i, j] = extensive_inner(vecs[i], vecs[j], state)
            G[j, i] = np.conj(G[i, j])
    return G


@dataclass
class ChargeBasis:
    """Densities of ``(f, k)`` charges with their Gram matrix.

    ``residuals`` holds ``||L*(Q) + i f Q|| / ||Q||`` on the discovery ring,
    measured in the Pauli-coefficient 2-norm.
    """

    densities: list
    gram: np.ndarray
    f: float = 0.0
    k: float = 0.0
    radius: int = 8
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.gram = np.asarray(self.gram, dtype=complex)
        if len(self.densities):
            if not np.allclose(self.gram, self.gram.conj().T, atol=1e-12):
                raise ValueError("Gram matrix is not Hermitian")
            if np.linalg.eigvalsh(self.gram).min() < -GRAM_PSD_TOL:
                raise ValueError("Gram matrix is not positive semidefinite")

    def __len__(self):
        return len(self.densities)

    @classmethod
    def from_densities(cls, densities: Sequence[LocalOperator], state, k: float = 0.0,
                       f: float = 0.0, radius: int = 8) -> "ChargeBasis":
        densities = list(densities)
        return cls(densities, gram_matrix(densities, k, radius, state), f, k, radius)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gram).min()) if len(self) else 0.0


def _anchored_strings(r: int) -> list[LocalOperator]:
    """Pauli strings on sites ``0..r-1`` with a non-identity letter on site 0."""
    out = []
    for code in range(3 * 4 ** (r - 1)):
        first, rest = divmod(code, 4 ** (r - 1))
        letters = [("X", "Y", "Z")[first]]
        for p in range(r - 1):
            letters.append("IXYZ"[(rest >> (2 * p)) & 3])
        label = " ".join(f"{l}{s}" for s, l in enumerate(letters) if l != "I")
        out.append(LocalOperator.from_string(label))
    return out


def _ring_sum(q: LocalOperator, n: int, k: float) -> LocalOperator:
    terms = [wrap(translate(q, x), 0, n) for x in range(n)]
    return linear_combination(terms, [np.exp(-1j * k * x) for x in range(n)])


def _as_generator(model) -> LindbladGenerator:
    if isinstance(model, LindbladGenerator):
        return model
    if hasattr(model, "generator"):
        return model.generator()
    return LindbladGenerator.from_interaction(model)


def _invariance_residual(gen: LindbladGenerator, Q: LocalOperator, f: float,
                         window: Window) -> float:
    R = gen.apply(Q, "forward", window) + 1j * f * Q
    nq = np.linalg.norm(Q.c) if not Q.is_zero() else 0.0
    nr = np.linalg.norm(R.c) if not R.is_zero() else 0.0
    return float(nr / nq) if nq > 0 else math.inf


def find_conserved_charges(model, f: float, support_radius: int, k: float = 0.0,
                           ring: int | None = None, state=None,
                           tol: float = CHARGE_TOL) -> ChargeBasis:
    """Translation-invariant ``(f, k)`` charges with densities on ``support_radius`` sites.

    Every density is expanded in the Pauli strings of ``0..r-1`` that act
    non-trivially on site 0.  Their phased ring sums are pushed through
    ``L* + i f`` and the null space of the resulting matrix is extracted
    by SVD.  The null vectors are orthonormalized in the Gram metric of
    ``state`` (default: the infinite-temperature product state); directions
    with vanishing norm are dropped.

    Parameters
    ----------
    model : LindbladModel, LindbladGenerator or Interaction
    ring : int, optional
        Ring used for the null-space problem, at least ``2 r + 4``;
        ``k * ring`` must be a multiple of ``2 pi``.
    """
    r = int(support_radius)
    if r < 1:
        raise ValueError("support radius must be positive")
    n = 2 * r + 4 if ring is None else int(ring)
    if n < 2 * r + 4:
        raise ValueError(f"ring of {n} sites is smaller than 2r+4 = {2 * r + 4}")
    turns = k * n / (2 * math.pi)
    if abs(turns - round(turns)) > 1e-9:
        raise WavenumberMismatch(f"k={k} is not commensurate with a ring of {n} sites")
    state = ProductGibbsState(0.0) if state is None else state
    gen = _as_generator(model)
    window = Window.ring(n)
    strings = _anchored_strings(r)
    rows: dict = {}
    cols = []
    for q in strings:
        Q = _ring_sum(q, n, k)
        R = gen.apply(Q, "forward", window) + 1j * f * Q
        col = {}
        if not R.is_zero():
            for key, c in zip(zip((R.x << np.uint64(R.origin)).tolist(),
                                  (R.z << np.uint64(R.origin)).tolist()), R.c):
                col[key] = c
                rows.setdefault(key, len(rows))
        cols.append(col)
    M = np.zeros((max(1, len(rows)), len(strings)), dtype=complex)
    for j, col in enumerate(cols):
        for key, c in col.items():
            M[rows[key], j] = c
    _, svals, Vh = np.linalg.svd(M, full_matrices=True)
    svals = np.concatenate([svals, np.zeros(len(strings) - len(svals))])
    # ||Q|| = sqrt(n) for a unit coefficient vector of anchored strings
    null = Vh[svals / math.sqrt(n) <= tol].conj()
    candidates = [linear_combination(strings, v, prune=1e-14) for v in null]
    candidates = [q for q in candidates if not q.is_zero()]
    densities: list = []
    if candidates:
        G = gram_matrix(candidates, k, r + 1, state)
        lam, U = np.linalg.eigh(G)
        keep = lam > PINV_CUTOFF * max(1.0, lam.max())
        for val, u in zip(lam[keep], U[:, keep].T):
            densities.append(linear_combination(candidates, u / math.sqrt(val), prune=1e-14))
    if not densities:
        warnings.warn(f"no ({f}, {k}) charges with support radius {r}", NoChargesFound)
        return ChargeBasis([], np.zeros((0, 0)), f, k, r + 1, [])
    residuals = [_invariance_residual(gen, _ring_sum(q, n, k), f, window) for q in densities]
    good = [i for i, res in enumerate(residuals) if res <= tol]
    densities = [densities[i] for i in good]
    residuals = [residuals[i] for i in good]
    basis = ChargeBasis(densities, gram_matrix(densities, k, r + 1, state), f, k, r + 1, residuals)
    return basis


@dataclass
class Projection:
    """Coefficients of the projection of ``a`` onto a charge basis."""

    coefficients: np.ndarray
    overlaps: np.ndarray
    projected_density: LocalOperator
    orthogonality_residual: float
    rank: int


def project_onto_charges(a: ExtensiveVector, basis: ChargeBasis, state) -> Projection:
    """Solve ``Gram c = <basis, a>`` with a pseudo-inverse (cutoff 1e-10).

    ``projected_density`` is ``sum_j c_j q_j``; ``orthogonality_residual``
    is the largest ``|<q_j, a - P a>|``.  A rank-deficient Gram matrix emits
    ``DegenerateGram``.
    """
    m = len(basis)
    if m == 0:
        return Projection(np.zeros(0, complex), np.zeros(0, complex), LocalOperator.zero(),
                          0.0, 0)
    if not math.isclose(a.k, basis.k, rel_tol=0.0, abs_tol=1e-12):
        raise WavenumberMismatch(f"vector at k={a.k}, basis at k={basis.k}")
    R = max(a.R, basis.radius)
    overlaps = np.array([extensive_inner(ExtensiveVector(q, basis.k, R), a, state)
                         for q in basis.densities])
    lam = np.linalg.eigvalsh(basis.gram)
    rank = int(np.sum(lam > PINV_CUTOFF * max(1.0, lam.max())))
    if rank < m:
        warnings.warn(f"Gram matrix has rank {rank} < {m}", DegenerateGram)
    c = np.linalg.pinv(basis.gram, rcond=PINV_CUTOFF, hermitian=True) @ overlaps
    proj = linear_combination(basis.densities, c)
    rest = ExtensiveVector(a.density - proj, a.k, R)
    orth = max(abs(extensive_inner(ExtensiveVector(q, basis.k, R), rest, state))
               for q in basis.densities)
    return Projection(c, overlaps, proj, float(orth), rank)


# ---------------------------------------------------------------------------
# Drude weights and Euler-scale correlators
# ---------------------------------------------------------------------------

@dataclass
class CorrelatorSeries:
    """Running fluid-cell correlator and, if a basis was supplied, its projected twin."""

    times: np.ndarray
    value: np.ndarray
    projected: np.ndarray | None = None
    displacements: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def residual(self) -> np.ndarray | None:
        return None if self.projected is None else np.abs(self.value - self.projected)

    def at(self, T: float, which: str = "value") -> complex:
        j = int(np.argmin(np.abs(self.times - T)))
        if abs(self.times[j] - T) > 1e-9:
            raise ValueError(f"T={T} is not a sample time")
        arr = {"value": self.value, "projected": self.projected,
               "residual": self.residual}[which]
        return arr[j]


def spacetime_correlations(A: LocalOperator, B: LocalOperator, times, state,
                           evolver: Evolver, radius: int | None = None,
                           margin: int = 0):
    """Connected correlations ``C[j, i] = (tau_{t_j}(A(x_i)), B)``.

    Returns ``(C, xs)``.  Ring windows use every site once (offsets in
    ``(-n/2, n/2]``); open windows use the translates that fit with
    ``margin`` sites to spare.  ``radius`` cuts ``|x|``.
    """
    window = evolver.window
    times = np.asarray(times, dtype=float)
    Ad = A.adjoint()
    one = identity()
    wB = state.expect(B)
    if window.periodic:
        xs = _ring_offsets(window.size, radius)
        Bs = [window.shift(B, -int(x)) for x in xs] + [one]
        C = evolver.correlations(Ad, Bs, state, times)
        return C[:, :-1] - C[:, -1:] * wB, xs
    if not _fits(window, B, margin):
        raise SupportOutsideWindow("B does not fit the window with the requested margin")
    R = window.size if radius is None else radius
    xs = np.array([x for x in range(-R, R + 1)
                   if _open_translate(window, Ad, x, margin) is not None], dtype=int)
    if len(xs) == 0:
        raise SupportOutsideWindow("no translate of A fits the window")
    C = np.zeros((len(times), len(xs)), dtype=complex)
    for i, x in enumerate(xs):
        Cx = evolver.correlations(translate(Ad, int(x)), [B, one], state, times)
        C[:, i] = Cx[:, 0] - Cx[:, 1] * wB
    return C, xs


def _fluid_cell_average(C: np.ndarray, xs: np.ndarray, times: np.ndarray, dt: float,
                        f: float, k: float, kappa: float) -> np.ndarray:
    integrand = C
    if k != 0.0:
        integrand = integrand * np.exp(1j * k * xs)[None, :]
    if kappa != 0.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            ph = np.exp(1j * kappa * np.outer(1.0 / times, xs))
        # the t = 0 sample carries weight 1
        ph[times == 0] = 1.0
        integrand = integrand * ph
    series = integrand.sum(axis=1)
    if f != 0.0:
        series = series * np.exp(-1j * f * times)
    return running_average(series, dt)


def _time_grid(T: float, dt: float) -> np.ndarray:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive multiple of dt")
    return np.arange(n + 1) * dt


def euler_correlator(a: LocalOperator, b: LocalOperator, f: float, k: float, kappa: float,
                     T: float, state, evolver: Evolver, radius: int | None = None,
                     dt: float = 0.02, basis: ChargeBasis | None = None,
                     margin: int = 0) -> CorrelatorSeries:
    """Running ``(1/T) int_0^T dt sum_x e^{ikx - ift} e^{i kappa x/t} (a(x,t), b)``.

    With a charge basis the same quantity is evaluated for the projected
    densities; the projection residual is the difference of the two.
    """
    times = _time_grid(T, dt)
    C, xs = spacetime_correlations(a, b, times, state, evolver, radius, margin)
    value = _fluid_cell_average(C, xs, times, dt, f, k, kappa)
    projected = None
    meta = {"f": f, "k": k, "kappa": kappa, "dt": dt, "radius": radius,
            "window": evolver.window.describe(), "method": evolver.method}
    if basis is not None:
        R = basis.radius
        pa = project_onto_charges(ExtensiveVector(a, k, R), basis, state)
        pb = project_onto_charges(ExtensiveVector(b, k, R), basis, state)
        meta["coefficients_a"] = pa.coefficients.tolist()
        meta["coefficients_b"] = pb.coefficients.tolist()
        if pa.projected_density.is_zero() or pb.projected_density.is_zero():
            projected = np.zeros_like(value)
        else:
            Cp, xp = spacetime_correlations(pa.projected_density, pb.projected_density, times,
                                            state, evolver, radius, margin)
            projected = _fluid_cell_average(Cp, xp, times, dt, f, k, kappa)
    return CorrelatorSeries(times, value, projected, xs, meta)


def drude_weight(A: LocalOperator, B: LocalOperator, f: float, k: float, T: float,
                 radius: int | None, state, evolver: Evolver, dt: float = 0.02,
                 basis: ChargeBasis | None = None, margin: int = 0) -> CorrelatorSeries:
    """Running ``(1/T) int_0^T sum_x e^{ikx - ift} (A(x,t), B) dt``.

    This is the fluid-cell correlator at ``kappa = 0``.
    """
    return euler_correlator(A, B, f, k, 0.0, T, state, evolver, radius, dt, basis, margin)


# ---------------------------------------------------------------------------
# Onsager coefficient and diffusion strengths
# ---------------------------------------------------------------------------

def _ring_evolver(evolver: Evolver) -> Evolver:
    if not evolver.window.periodic:
        raise SupportOutsideWindow("second-moment sums need a periodic window")
    if evolver.method == "ode-rk4":
        raise ValueError("second-moment sums use a dense engine")
    return evolver


def _backward(evolver: Evolver) -> Evolver:
    other = "backward" if evolver.direction == "forward" else "forward"
    return Evolver(evolver.generator, evolver.window, evolver.method, evolver.dt, other,
                   evolver.dense_limit, evolver.step_tol, evolver.term_budget, evolver.prune)


def _conn_dense(state, X: np.ndarray, Y: np.ndarray, n: int) -> complex:
    """``(X, Y) = omega(X^dag Y) - omega(X^dag) omega(Y)`` for dense ring matrices."""
    d = state.diagonal(n)
    Xd = X.conj().T
    both = np.sum(d[:, None] * Xd * Y.T)
    return complex(both - np.dot(d, np.diagonal(Xd)) * np.dot(d, np.diagonal(Y)))


def _second_moments(S: np.ndarray, S0: np.ndarray, state, n: int, xs: np.ndarray):
    """``sum_x w(x) (iota_x S, S0)`` ingredients: returns correlations per offset."""
    return np.array([_conn_dense(state, ring_translate_matrix(S, int(x), n), S0, n)
                     for x in xs])


@dataclass
class DiffusionStrengths:
    t: float
    L_norm: float
    L_irr: float
    v: float
    tails: dict = field(default_factory=dict)


def diffusion_strengths(model, mu: float, t: float, evolver: Evolver, radius: int | None = None,
                        density: LocalOperator | None = None, v: float | None = None,
                        state=None) -> DiffusionStrengths:
    """Second-moment diffusion strengths of the spin density on a ring.

    ``L_norm(t) = (1/t) sum_x (x^2 - (v t)^2) (tau*_t s(x), s(0))`` and
    ``L_irr(t) = (1/2t) sum_x x^2 (tau_t tau*_t s(x), s(0))`` where
    ``tau*`` is the forward semigroup of ``evolver`` and ``tau`` its
    backward partner.  ``v`` defaults to the hydrodynamic velocity of the
    model at ``mu``.  Tails hold the magnitude of the outermost shell.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    evolver = _ring_evolver(evolver)
    n = evolver.window.size
    sites = evolver.window.sites
    state = ProductGibbsState(mu) if state is None else state
    s0 = sz(0) if density is None else density
    if v is None:
        v = _hydro_velocity(model, mu, state)
    xs = _ring_offsets(n, radius)
    S0 = to_sparse(s0, sites).toarray()
    St = evolver.matrix_trajectory(s0, [t])[0]
    Sback = _backward(evolver).matrix_trajectory(St, [t])[0]
    fwd = _second_moments(St, S0, state, n, xs)
    rev = _second_moments(Sback, S0, state, n, xs)
    x2 = xs.astype(float) ** 2
    L_norm = np.sum((x2 - (v * t) ** 2) * fwd) / t
    L_irr = np.sum(x2 * rev) / (2 * t)
    edge = np.abs(xs) == np.abs(xs).max()
    tails = {"norm": float(np.sum(np.abs((x2 - (v * t) ** 2) * fwd)[edge]) / t),
             "irr": float(np.sum(np.abs(x2 * rev)[edge]) / (2 * t)),
             "imag_norm": float(abs(L_norm.imag)), "imag_irr": float(abs(L_irr.imag))}
    return DiffusionStrengths(t, float(L_norm.real), float(L_irr.real), float(v), tails)


def _hydro_velocity(model, mu: float, state) -> float:
    """``chi^-1 <M, j>^c`` from the derived current."""
    from .open_chain import derive_current
    j = derive_current(model).j_total
    s = sz(0)
    num = extensive_inner(ExtensiveVector(s, 0.0, 3), ExtensiveVector(j, 0.0, 3), state)
    chi = extensive_inner(ExtensiveVector(s, 0.0, 3), ExtensiveVector(s, 0.0, 3), state)
    return float((num / chi).real)


@dataclass
class OnsagerResult:
    """Green-Kubo estimate and its second-moment decomposition at sample times."""

    times: np.ndarray
    L_gk: np.ndarray
    L_norm: np.ndarray
    L_irr: np.ndarray
    v: float
    chi: float
    static: float
    static_ring: float
    projection: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def identity_residual(self) -> np.ndarray:
        return np.abs(self.L_gk - (self.L_norm - self.L_irr))

    def to_rows(self):
        return [(float(T), float(a), float(b), float(c), float(r)) for T, a, b, c, r
                in zip(self.times, self.L_gk, self.L_norm, self.L_irr, self.identity_residual)]


def onsager_estimate(model, mu: float, T: float | Sequence[float], evolver: Evolver,
                     radius: int | None = None, basis: ChargeBasis | None = None,
                     chaotic: bool = True) -> OnsagerResult:
    """Green-Kubo coefficient ``(1/T) sum_x (J(x), J(0))`` of the projected current.

    ``J = int_0^T tau*_t(j - P j) dt``, where ``P`` projects onto the
    magnetization density (``chaotic=True``) or onto a supplied charge
    basis.  The same times are used for the second-moment decomposition
    from :func:`diffusion_strengths`; the two routes meet through a
    discrete integration by parts.

    The evolver must act on a ring with a dense engine and be generated by
    ``model``.
    """
    from .open_chain import derive_current, validate_model
    rep = validate_model(model)
    if not rep.strongly_conserving:
        raise ModelInvalid("model does not conserve the magnetization")
    evolver = _ring_evolver(evolver)
    Ts = sorted([float(T)] if np.isscalar(T) else [float(t) for t in T])
    if Ts[0] <= 0:
        raise ValueError("sample times must be positive")
    n = evolver.window.size
    sites = evolver.window.sites
    state = ProductGibbsState(mu)
    s0 = sz(0)
    j = derive_current(model).j_total
    if chaotic or basis is None:
        basis = ChargeBasis.from_densities([s0], state, 0.0, 0.0, 3)
    proj = project_onto_charges(ExtensiveVector(j, 0.0, 3), basis, state)
    jm = j - proj.projected_density
    chi = extensive_inner(ExtensiveVector(s0, 0.0, 3), ExtensiveVector(s0, 0.0, 3), state).real
    v = _hydro_velocity(model, mu, state)
    static = extensive_inner(ExtensiveVector(jm, 0.0, 4), ExtensiveVector(jm, 0.0, 4), state).real
    xs = _ring_offsets(n, radius)
    Jm = evolver.window.fold(jm)
    J0 = to_sparse(Jm, sites).toarray()
    static_ring = sum(_second_moments(J0, J0, state, n, xs)).real
    integrals = evolver.integrate(Jm, Ts, dense=True)
    L_gk = np.array([np.sum(_second_moments(Y, Y, state, n, xs)).real / t
                     for (X, Y), t in zip(integrals, Ts)])
    ds = [diffusion_strengths(model, mu, t, evolver, radius, s0, v, state) for t in Ts]
    meta = {"window": evolver.window.describe(), "method": evolver.method, "dt": evolver.dt,
            "chaotic": bool(chaotic), "basis_size": len(basis),
            "tails": [d.tails for d in ds]}
    return OnsagerResult(np.array(Ts), L_gk, np.array([d.L_norm for d in ds]),
                         np.array([d.L_irr for d in ds]), v, float(chi), float(static),
                         float(static_ring), proj.coefficients, meta)
