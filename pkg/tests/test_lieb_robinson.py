import math

import mpmath
import numpy as np
import pytest

from qlattice.dynamics import Evolver, LindbladGenerator, Window, xx_interaction
from qlattice.errors import FitDegenerate, SupportOutsideWindow
from qlattice.lieb_robinson import (LR_PREFACTOR, LightConeGrid, commutator_norm_grid,
                                    fit_light_cone, theoretical_velocity)
from qlattice.open_chain import LindbladModel
from qlattice.operators import sz


def synthetic_grid(v, lam):
    xs = np.arange(0, 20)
    ts = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
    vals = np.minimum(1.0, np.exp(-lam * (xs[:, None] - v * ts[None, :])))
    return LightConeGrid(xs, ts, vals)


def test_prefactor_extended_precision():
    mpmath.mp.dps = 30
    ref = 4 * mpmath.e * mpmath.zeta(2)
    assert math.isclose(LR_PREFACTOR, float(ref), rel_tol=1e-15)
    assert math.isclose(LR_PREFACTOR, 17.8856, abs_tol=1e-4)


def test_theoretical_velocity_examples():
    assert math.isclose(theoretical_velocity(LindbladModel(1.0)), 4 * LR_PREFACTOR)
    assert math.isclose(theoretical_velocity(LindbladModel(1.0)), 71.5423, abs_tol=1e-4)
    assert theoretical_velocity(LindbladModel()) == 0.0


def test_synthetic_cone_recovered():
    est = fit_light_cone(synthetic_grid(2.0, 1.0))
    assert abs(est.v_fit - 2.0) <= 0.05 * 2.0
    assert abs(est.lambda_fit - 1.0) <= 0.05
    est = fit_light_cone(synthetic_grid(3.5, 0.6), threshold=1e-4)
    assert abs(est.v_fit - 3.5) <= 0.05 * 3.5
    assert abs(est.lambda_fit - 0.6) <= 0.05 * 0.6


def test_degenerate_grids():
    xs = np.arange(6)
    ts = np.array([0.1, 0.2, 0.3])
    with pytest.raises(FitDegenerate):
        fit_light_cone(LightConeGrid(xs, ts, np.zeros((6, 3))))
    with pytest.raises(FitDegenerate):
        fit_light_cone(LightConeGrid(xs[:3], ts, np.ones((3, 3))))


def test_free_model_grid_is_zero():
    ev = Evolver(LindbladModel().generator(), Window.interval(0, 9), "ode-rk4")
    grid = commutator_norm_grid(sz(2), sz(2), range(0, 5), [0.1, 0.2, 0.3], ev)
    assert np.all(grid.values == 0)
    with pytest.raises(FitDegenerate):
        fit_light_cone(grid)


def test_grid_examples():
    ev = Evolver(LindbladGenerator.from_interaction(xx_interaction(1.0)), Window.interval(0, 11),
                 "dense-exponential")
    grid = commutator_norm_grid(sz(2), sz(2), [0, 5], [0.0], ev)
    assert np.all(grid.values == 0)
    grid = commutator_norm_grid(sz(2), sz(2), range(0, 8), [0.5], ev)
    tail = grid.values[2:, 0]
    assert np.all(np.diff(tail) < 0)
    assert grid.metadata["time_reversal_asymmetry"] < 1e-10


def test_margin_rule_enforced():
    ev = Evolver(LindbladGenerator.from_interaction(xx_interaction(1.0)), Window.interval(0, 11),
                 "ode-rk4")
    with pytest.raises(SupportOutsideWindow):
        commutator_norm_grid(sz(2), sz(2), [0, 1, 2], [0.1, 0.2, 0.5], ev,
                             margin_velocity=71.5)


def test_xx_cone_below_theory():
    m = LindbladModel(1.0)
    ev = Evolver(m.generator(), Window.interval(0, 9), "dense-exponential")
    ts = [0.25, 0.5, 0.75]
    grid = commutator_norm_grid(sz(2), sz(2), range(0, 6), ts, ev)
    est = fit_light_cone(grid, norm_scale=1.0)
    assert est.v_fit <= theoretical_velocity(m)
    # outside-cone suppression: nonincreasing beyond the crossing
    for j, xc in enumerate(est.residuals["crossing_positions"]):
        beyond = grid.values[grid.displacements >= math.ceil(xc) + 2, j]
        assert np.all(np.diff(beyond) <= 1e-12)
