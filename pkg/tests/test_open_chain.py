import math

import mpmath
import pytest
import sympy

from qlattice.errors import ModelInvalid, RingTooLarge
from qlattice.open_chain import (LindbladModel, derive_current, equilibrium_report,
                                 gibbs_stationarity_residual, lindblad_current_closed_form,
                                 lower_bound, random_model, validate_model)
from qlattice.operators import proj_down, proj_up
from qlattice.states import ProductGibbsState

HOP = LindbladModel(0.0, 0.0, 0.0, ((1, 0, 0, 0, 0),))


def violating_model(rng):
    return random_model(rng, n_jumps=2, detailed_balance=False, scale=0.5)


def test_validate_examples(rng):
    rep = validate_model(LindbladModel(0.3, 0.1, 0.2, ((0.5, 0.2j, 0.7, 0.7, 0.1),)))
    assert rep.condition_residual == 0
    assert rep.strongly_conserving
    rep = validate_model(HOP)
    assert rep.condition_residual == 0 and rep.detailed_balance
    assert rep.telescope_residual <= 1e-10
    bad = violating_model(rng)
    rep = validate_model(bad)
    assert rep.condition_residual > 1e-3
    assert rep.telescope == "UnsolvableTelescope"
    assert rep.strongly_conserving


def test_random_balanced_models_telescope(rng):
    for _ in range(10):
        rep = validate_model(random_model(rng))
        assert rep.condition_residual <= 1e-12
        assert rep.detailed_balance


def test_current_identities_over_draws(rng):
    for _ in range(100):
        m = random_model(rng, n_jumps=int(rng.integers(1, 4)))
        cp = derive_current(m)
        assert cp.conservation_residual <= 1e-12
        assert cp.closed_form_residual <= 1e-12
        assert cp.j_total.allclose(cp.j_hamiltonian + cp.j_lindblad, atol=1e-15)


def test_pure_hopping_current():
    cp = derive_current(HOP)
    assert cp.j_lindblad.allclose(-2 * (proj_down(0) @ proj_up(1)), atol=1e-15)
    assert cp.j_lindblad.allclose(lindblad_current_closed_form(HOP), atol=1e-15)


def test_balanced_hopping_has_no_average_current():
    m = LindbladModel(0.0, 0.0, 0.0, ((0.8, 0.8, 0, 0, 0),))
    jL = derive_current(m).j_lindblad
    for mu in (-1.0, 0.0, 0.4, 2.0):
        assert abs(ProductGibbsState(mu).expect(jL)) <= 1e-15


def test_hamiltonian_current_averages_to_zero():
    m = LindbladModel(0.7 - 0.4j, 0.3, -1.2, ())
    cp = derive_current(m)
    for mu in (0.0, 0.5, -1.3):
        w = ProductGibbsState(mu)
        assert abs(w.expect(cp.j_total)) <= 1e-15
        assert abs(w.expect(cp.j_hamiltonian)) <= 1e-15


def test_average_current_closed_form(rng):
    for _ in range(20):
        m = random_model(rng, n_jumps=int(rng.integers(1, 4)))
        mu = float(rng.uniform(-2, 2))
        jL = derive_current(m).j_lindblad
        want = sum(abs(b) ** 2 - abs(a) ** 2 for a, b, *_ in m.jumps) / (2 * math.cosh(mu) ** 2)
        got = ProductGibbsState(mu).expect(jL)
        assert abs(got - want) <= 1e-12
        rep = equilibrium_report(m, mu)
        assert abs(rep.j_avg - want) <= 1e-12
        assert abs(rep.j_avg_trace - want) <= 1e-12


def test_equilibrium_at_zero_field(rng):
    rep = equilibrium_report(random_model(rng), 0.0)
    assert rep.s == 0 and rep.chi == 1 and rep.v == 0


def test_lower_bound_extended_precision():
    mpmath.mp.dps = 30
    ref = 1 / (64 * mpmath.e * mpmath.zeta(2))
    assert math.isclose(lower_bound(HOP, 0.0), float(ref), rel_tol=0, abs_tol=1e-15)
    assert abs(lower_bound(HOP, 0.0) - 3.4945e-3) <= 1e-7
    assert math.isclose(equilibrium_report(HOP, 0.0).L_lower, float(ref), abs_tol=1e-15)


def test_lower_bound_direct_formula(rng):
    mpmath.mp.dps = 30
    for _ in range(10):
        m = random_model(rng)
        mu = float(rng.uniform(-1.5, 1.5))
        imb = sum(mpmath.mpf(abs(a)) ** 2 - mpmath.mpf(abs(b)) ** 2 for a, b, *_ in m.jumps)
        ref = imb ** 2 / (32 * mpmath.e * mpmath.zeta(2) * m.tilde_v() * mpmath.cosh(mu) ** 4)
        assert math.isclose(lower_bound(m, mu), float(ref), rel_tol=1e-12)
        assert math.isclose(equilibrium_report(m, mu).L_lower, float(ref), rel_tol=1e-12)


def test_lower_bound_zero_iff_balanced_hopping(rng):
    m = LindbladModel(1.0, 0.2, 0.0, ((0.6, 0.6j, 0.1, 0.1, 0.3),))
    assert lower_bound(m, 0.7) == 0.0
    assert equilibrium_report(m, 0.7).L_lower == 0.0
    m = LindbladModel(1.0, 0.2, 0.0, ((0.6, 0.5, 0.1, 0.1, 0.3),))
    assert lower_bound(m, 0.7) > 0
    for _ in range(10):
        m = random_model(rng)
        assert (lower_bound(m, 0.3) > 0) == (m.hopping_imbalance() != 0)


def test_flux_curvature_symbolic(rng):
    s, a2, b2 = sympy.symbols("s a2 b2", real=True)
    j = (b2 - a2) * (1 - s ** 2) / 2
    v = sympy.diff(j, s)
    assert sympy.simplify(sympy.diff(v, s) - (a2 - b2)) == 0
    m = random_model(rng)
    A2 = sum(abs(t[0]) ** 2 for t in m.jumps)
    B2 = sum(abs(t[1]) ** 2 for t in m.jumps)
    for mu in (0.0, 0.6, -1.1):
        rep = equilibrium_report(m, mu)
        subs = {s: math.tanh(mu), a2: A2, b2: B2}
        assert math.isclose(rep.v, float(v.subs(subs)), rel_tol=1e-12, abs_tol=1e-15)
        assert math.isclose(rep.v_prime, A2 - B2, rel_tol=1e-12)
        assert math.isclose(rep.chi, 1 / math.cosh(mu) ** 2, rel_tol=1e-14)


@pytest.mark.parametrize("mu", [0.0, 0.5, 1.0])
def test_gibbs_stationarity(rng, mu):
    m = random_model(rng, scale=0.5)
    assert gibbs_stationarity_residual(m, mu, 6) <= 1e-10


def test_stationarity_fails_off_balance(rng):
    bad = violating_model(rng)
    assert gibbs_stationarity_residual(bad, 1.0, 5) > 1e-4
    # the identity is stationary only when sum [L, L^dag] telescopes on the ring
    assert gibbs_stationarity_residual(bad, 0.0, 5) > 1e-4
    hamiltonian_only = LindbladModel(0.4 + 0.3j, 0.2, -0.7, ())
    assert gibbs_stationarity_residual(hamiltonian_only, 1.0, 6) <= 1e-10
    with pytest.raises(RingTooLarge):
        gibbs_stationarity_residual(bad, 0.5, 8)


def test_model_json_round_trip(rng):
    m = random_model(rng)
    assert LindbladModel.from_json(m.to_json()) == m
    with pytest.raises(ModelInvalid):
        LindbladModel.from_json({"jumps": [[1, 2, 3]]})
    with pytest.raises(ModelInvalid):
        LindbladModel(0, 1j)
