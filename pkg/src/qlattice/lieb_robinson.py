"""
Light-cone measurements: commutator norms on space-time grids, cone fits
and the theoretical propagation velocity of the open-chain model family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .dynamics import Evolver
from .errors import FitDegenerate, SupportOutsideWindow
from .operators import LocalOperator, commutator, operator_norm, spectral_norm, to_sparse

ZETA2 = math.pi ** 2 / 6
LR_PREFACTOR = 4 * math.e * ZETA2
CLAMP = 1e-14


@dataclass
class LightConeGrid:
    """Commutator norms ``values[i, j] = ||[tau_{t_j}(A(x_i)), B]||``."""

    displacements: np.ndarray
    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_rows(self) -> list[tuple[int, float, float]]:
        return [(int(x), float(t), float(self.values[i, j]))
                for i, x in enumerate(self.displacements) for j, t in enumerate(self.times)]


@dataclass
class LRVelocityEstimate:
    v_fit: float
    lambda_fit: float
    v_theory: float | None
    threshold: float
    residuals: dict

    def summary(self) -> dict:
        return {"v_fit": self.v_fit, "lambda_fit": self.lambda_fit, "v_theory": self.v_theory,
                "threshold": self.threshold, "residuals": self.residuals}


def theoretical_velocity(model) -> float:
    """``4 e zeta(2) V~`` for a model exposing ``tilde_v()``."""
    return LR_PREFACTOR * model.tilde_v()


def commutator_norm_grid(A: LocalOperator, B: LocalOperator, displacements: Sequence[int],
                         times: Sequence[float], evolver: Evolver,
                         margin_velocity: float = 0.0, margin_extra: int = 2) -> LightConeGrid:
    """Measure ``||[tau_t(translate(A, x)), B]||`` on a grid.

    Parameters
    ----------
    margin_velocity : float
        On open windows every translate of ``A`` and ``B`` must keep
        ``ceil(margin_velocity * max(times)) + margin_extra`` sites of bulk
        to each boundary; otherwise ``SupportOutsideWindow`` is raised.
    """
    window = evolver.window
    times = np.asarray(sorted(times), dtype=float)
    xs = np.asarray(displacements, dtype=int)
    margin = 0
    if not window.periodic:
        margin = int(math.ceil(margin_velocity * times.max() - 1e-12)) + margin_extra
        for op in [B] + [A.translate(int(x)) for x in xs]:
            supp = op.support
            if supp and (min(supp) - window.start < margin or window.end - max(supp) < margin):
                raise SupportOutsideWindow(
                    f"support {supp} closer than {margin} sites to the window boundary")
    values = np.zeros((len(xs), len(times)))
    asym = 0.0
    reversible = evolver.generator.is_hamiltonian and evolver.method == "dense-exponential"
    dense = evolver.method != "ode-rk4"
    if dense:
        Bm = to_sparse(B, window.sites)
        # Hermitian inputs stay Hermitian under the unital *-preserving evolution
        herm = A.is_hermitian(1e-14) and B.is_hermitian(1e-14)
    for i, x in enumerate(xs):
        Ax = window.shift(A, int(x))
        if not dense:
            for j, At in enumerate(evolver.trajectory(Ax, times)):
                values[i, j] = operator_norm(commutator(At, B), max(evolver.dense_limit, 12))
            continue
        # dense engines: norms of window matrices, equal to norms on the support
        for j, M in enumerate(evolver.matrix_trajectory(Ax, times)):
            if times[j] == 0:
                # exact algebra at t = 0, so disjoint supports give exactly 0
                values[i, j] = operator_norm(commutator(Ax, B), max(evolver.dense_limit, 12))
            else:
                values[i, j] = _commutator_norm(M, Bm, herm)
        if reversible and i == 0:
            # time-reversal diagnostic, measured on the first displacement
            spec = evolver.spectrum()
            Am = to_sparse(Ax, window.sites)
            for j, t in enumerate(times):
                if t == 0:
                    continue
                back = _commutator_norm(spec.evolve_matrix(Am, -t), Bm, herm)
                asym = max(asym, abs(back - values[i, j]))
    meta = {"window": window.describe(), "method": evolver.method, "dt": evolver.dt,
            "margin_sites": margin, "margin_velocity": margin_velocity}
    if reversible:
        meta["time_reversal_asymmetry"] = asym
    return LightConeGrid(xs, times, values, meta)


def _commutator_norm(M: np.ndarray, B, hermitian: bool = False) -> float:
    """``||[M, B]||`` for a dense window matrix and a sparse ``B``.

    For Hermitian inputs ``i[M, B]`` is Hermitian and its norm comes from a
    Lanczos solve that only needs matrix-vector products, so the commutator
    matrix is never formed.
    """
    if hermitian and M.shape[0] > 512:
        def matvec(v):
            v = np.ravel(v)
            return 1j * (M @ (B @ v) - B @ (M @ v))
        op = spla.LinearOperator(M.shape, matvec=matvec, dtype=complex)
        val = spla.eigsh(op, k=1, which="LM", return_eigenvectors=False, tol=1e-14)
        return float(abs(val[0]))
    C = np.asarray((B.T @ M.T).T) - np.asarray(B @ M)
    return spectral_norm(C)


def _linear_fit(x: np.ndarray, y: np.ndarray):
    """Least-squares ``y = a + b x``; returns ``(b, a, r2)``."""
    A = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[1]), float(coef[0]), r2


def crossing_point(xs: np.ndarray, vals: np.ndarray, threshold: float) -> float | None:
    """Outermost ``x`` where the profile falls through ``threshold``.

    The crossing is interpolated linearly in ``log(value)`` between the last
    point at or above threshold and its successor.
    """
    above = np.flatnonzero(vals >= threshold)
    if len(above) == 0:
        return None
    k = above[-1]
    if k == len(xs) - 1:
        return None
    v0, v1 = vals[k], vals[k + 1]
    if v1 <= 0:
        return float(xs[k])
    frac = (math.log(threshold) - math.log(v0)) / (math.log(v1) - math.log(v0))
    return float(xs[k] + frac * (xs[k + 1] - xs[k]))


def tail_regression(xs: np.ndarray, vals: np.ndarray, start: float):
    """Regression of ``log(vals)`` on ``x`` for ``x > start`` and positive values.

    Returns ``(slope, r2, n_points)`` or ``None`` when fewer than 2 points.
    """
    mask = (xs > start) & (vals > 0)
    if mask.sum() < 2:
        return None
    slope, _, r2 = _linear_fit(xs[mask].astype(float), np.log(vals[mask]))
    return slope, r2, int(mask.sum())


def fit_light_cone(grid: LightConeGrid, threshold: float | None = None,
                   norm_scale: float = 1.0) -> LRVelocityEstimate:
    """Fit the velocity and decay rate of a light cone.

    ``v_fit`` is the slope of the crossing positions ``x*(t)`` against ``t``;
    ``lambda_fit`` is the mean negative log-slope of the profile beyond the
    crossing.  The default threshold is ``1e-3 * norm_scale`` where
    ``norm_scale`` should be ``||A|| ||B||``.
    """
    if threshold is None:
        threshold = 1e-3 * norm_scale
    xs = np.asarray(grid.displacements, dtype=float)
    ts = np.asarray(grid.times, dtype=float)
    if len(ts) < 3 or len(xs) < 4:
        raise FitDegenerate("need at least 3 times and 4 displacements")
    order = np.argsort(xs)
    xs = xs[order]
    vals = np.where(grid.values[order] < CLAMP, 0.0, grid.values[order])
    if not vals.max() > threshold:
        raise FitDegenerate("threshold is not below the largest value")
    cross_t, cross_x, slopes, r2s = [], [], [], []
    for j, t in enumerate(ts):
        xc = crossing_point(xs, vals[:, j], threshold)
        if xc is None:
            continue
        cross_t.append(t)
        cross_x.append(xc)
        reg = tail_regression(xs, vals[:, j], xc)
        if reg is not None:
            slopes.append(reg[0])
            r2s.append(reg[1])
    if len(cross_t) < 2:
        raise FitDegenerate(f"only {len(cross_t)} threshold crossings")
    v_fit, x0, r2_cone = _linear_fit(np.array(cross_t), np.array(cross_x))
    lam = float(-np.mean(slopes)) if slopes else float("nan")
    residuals = {"crossing_times": cross_t, "crossing_positions": cross_x,
                 "cone_intercept": x0, "cone_r2": r2_cone,
                 "tail_slopes": slopes, "tail_r2": r2s}
    return LRVelocityEstimate(v_fit, lam, grid.metadata.get("v_theory"), threshold, residuals)
