import math
import warnings

import numpy as np
import pytest
import scipy.special as sps
from hypothesis import given, settings, strategies as st

from conftest import operators, random_operator
from qlattice.dynamics import (Evolver, LindbladGenerator, Window, lindblad_apply,
                               xx_interaction)
from qlattice.errors import NoChargesFound, WavenumberMismatch
from qlattice.open_chain import LindbladModel, derive_current, random_model
from qlattice.operators import identity, sminus, sx, sy, sz, translate
from qlattice.states import ProductGibbsState, connected
from qlattice.transport import (ChargeBasis, ExtensiveVector, RayPlan, diffusion_strengths,
                                drude_weight, euler_correlator, extensive_inner,
                                find_conserved_charges, gram_matrix, onsager_estimate,
                                project_onto_charges, ray_average, ray_moment, running_average,
                                spacetime_correlations)

XX = xx_interaction(1.0)


@pytest.fixture(scope="module")
def xx_ring8():
    return Evolver(LindbladGenerator.from_interaction(XX), Window.ring(8), "dense-exponential")


@pytest.fixture(scope="module")
def xx_ring12():
    return Evolver(LindbladGenerator.from_interaction(XX), Window.ring(12), "dense-exponential")


def energy_basis(state, R=3):
    return ChargeBasis.from_densities([sz(0), XX.templates()[-1]], state, radius=R)


def test_running_average_trapezoid():
    t = np.linspace(0, 2, 201)
    avg = running_average(t ** 2, 0.01)
    assert np.isclose(avg[-1], 4 / 3, atol=1e-4)
    assert avg[0] == 0


@pytest.mark.parametrize("mu", [0.0, 0.4])
def test_free_fermion_bessel_oracle(xx_ring12, mu):
    state = ProductGibbsState(mu)
    times = [0.0, 0.5, 1.0, 1.5]
    C, xs = spacetime_correlations(sz(0), sz(0), times, state, xx_ring12)
    for j, t in enumerate(times):
        # images around the ring; only the antipode sees a second one
        want = sum(sps.jv(xs + 12 * m, 2 * t) ** 2 for m in (-1, 0, 1)) / math.cosh(mu) ** 2
        assert np.allclose(C[j], want, atol=1e-6)


def test_extensive_inner_examples():
    mu = 0.7
    w = ProductGibbsState(mu)
    a = ExtensiveVector(sz(0), 0.0, 5)
    assert np.isclose(extensive_inner(a, a, w), 1 / math.cosh(mu) ** 2, atol=1e-15)
    b = ExtensiveVector(sz(0), math.pi, 5)
    assert np.isclose(extensive_inner(b, b, w), 1 / math.cosh(mu) ** 2, atol=1e-15)
    val, tail = extensive_inner(a, a, w, return_tail=True)
    assert tail == 0.0
    with pytest.raises(WavenumberMismatch):
        extensive_inner(a, b, w)


def test_disjoint_shells_vanish(rng):
    w = ProductGibbsState(0.3)
    A = random_operator(rng, [0, 1])
    B = random_operator(rng, [0])
    for x in range(2, 6):
        assert connected(w, translate(A, x), B) == 0
        assert connected(w, translate(A, -x), B) == 0


@settings(max_examples=20)
@given(operators((0, 1)), operators((0, 1)), st.floats(-1, 1), st.floats(-math.pi, math.pi))
def test_inner_product_symmetry(A, B, mu, k):
    w = ProductGibbsState(mu)
    a, b = ExtensiveVector(A, k, 4), ExtensiveVector(B, k, 4)
    assert abs(extensive_inner(a, b, w) - np.conj(extensive_inner(b, a, w))) <= 1e-12
    assert extensive_inner(a, a, w).real >= -1e-10
    G = gram_matrix([A, B, A + 2j * B], k, 4, w)
    assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_projection_examples(rng):
    w = ProductGibbsState(0.5)
    basis = ChargeBasis.from_densities([sz(0)], w, radius=3)
    p = project_onto_charges(ExtensiveVector(sz(0), 0.0, 3), basis, w)
    assert np.allclose(p.coefficients, [1.0], atol=1e-14)
    assert p.orthogonality_residual <= 1e-10
    p = project_onto_charges(ExtensiveVector(sx(0) @ sy(1), 0.0, 3), basis, w)
    assert np.all(p.coefficients == 0)
    # projection of a vector in the span returns it
    basis2 = energy_basis(w)
    a = 0.3 * sz(0) - 1.2 * XX.templates()[-1]
    p = project_onto_charges(ExtensiveVector(a, 0.0, 3), basis2, w)
    assert np.allclose(p.coefficients, [0.3, -1.2], atol=1e-10)
    assert p.orthogonality_residual <= 1e-10


def test_projection_idempotent(rng):
    w = ProductGibbsState(0.2)
    basis = energy_basis(w)
    for _ in range(5):
        a = ExtensiveVector(random_operator(rng, [0, 1], 6), 0.0, 3)
        p1 = project_onto_charges(a, basis, w)
        p2 = project_onto_charges(ExtensiveVector(p1.projected_density, 0.0, 3), basis, w)
        assert np.allclose(p1.coefficients, p2.coefficients, atol=1e-12)
        assert p1.orthogonality_residual <= 1e-9


def test_magnetization_is_always_a_charge(rng):
    m = random_model(rng)
    basis = find_conserved_charges(m, 0.0, 1)
    assert len(basis) == 1
    assert basis.densities[0].allclose(sz(0), atol=1e-12) or \
        basis.densities[0].allclose(-sz(0), atol=1e-12)
    assert max(basis.residuals) <= 1e-8
    assert basis.min_eigenvalue() >= -1e-10


def in_span(op, densities):
    keys = sorted({p for q in densities + [op] for p in q.terms}, key=str)
    M = np.array([[q.terms.get(p, 0) for q in densities] for p in keys])
    rhs = np.array([op.terms.get(p, 0) for p in keys])
    c, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return np.abs(M @ c - rhs).max()


def test_energy_density_is_found_for_xx():
    basis = find_conserved_charges(XX, 0.0, 2)
    assert max(basis.residuals) <= 1e-8
    assert in_span(sz(0), basis.densities) <= 1e-10
    assert in_span(XX.templates()[-1], basis.densities) <= 1e-10


def test_oscillating_charge_in_a_field():
    h = 0.7
    xxx = LindbladModel(2.0, h, 1.0, ())
    basis = find_conserved_charges(xxx, 2 * h, 1)
    assert len(basis) == 1
    assert in_span(sminus(0), basis.densities) <= 1e-12
    assert max(basis.residuals) <= 1e-8


def test_free_fermion_modes_not_local():
    n = 8
    k = 2 * math.pi / n
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        basis = find_conserved_charges(XX, 2 * math.cos(k), 2, k=k, ring=n)
    assert len(basis) == 0
    assert any(issubclass(c.category, NoChargesFound) for c in caught)


def test_drude_examples(xx_ring8):
    w = ProductGibbsState(0.4)
    d = drude_weight(sz(0), identity(), 0.0, 0.0, 2.0, None, w, xx_ring8)
    assert np.all(d.value == 0)
    d = drude_weight(sz(0), sz(0), 0.0, 0.0, 2.0, None, w, xx_ring8)
    assert np.allclose(d.value, 1 / math.cosh(0.4) ** 2, atol=1e-12)


def test_euler_reductions(xx_ring8):
    w = ProductGibbsState(0.0)
    basis = energy_basis(w)
    e = euler_correlator(sx(0), sx(0), 0.0, 0.0, 0.0, 2.0, w, xx_ring8)
    d = drude_weight(sx(0), sx(0), 0.0, 0.0, 2.0, None, w, xx_ring8)
    assert np.array_equal(e.value, d.value)
    e = euler_correlator(sz(0), sz(0), 0.0, 0.0, 1.0, 2.0, w, xx_ring8, basis=basis)
    assert np.abs(e.residual).max() <= 1e-9


def test_ray_average_constant_argument(xx_ring8):
    w = ProductGibbsState(0.5)
    r = ray_average(identity(), sz(0), RayPlan(0.3, 1, 2.0, 0.05), w, xx_ring8)
    assert np.allclose(r.average, w.expect(sz(0)), atol=1e-14, rtol=0)


def test_ray_average_dt_refinement(xx_ring8):
    w = ProductGibbsState(0.5)
    coarse = ray_average(sz(0), sz(0), RayPlan(0.3, 1, 4.0, 0.02), w, xx_ring8)
    fine = ray_average(sz(0), sz(0), RayPlan(0.3, 1, 4.0, 0.01), w, xx_ring8)
    assert abs(coarse.at(4.0) - fine.at(4.0)) <= 1e-4
    assert abs(coarse.at(2.0) - fine.at(2.0)) <= 1e-4


def test_ray_moment_examples(xx_ring8):
    w = ProductGibbsState(0.5)
    plan = RayPlan(0.3, 1, 2.0, 0.02)
    for n in (1, 2, 3):
        m = ray_moment(identity(0.7), n, plan, w, xx_ring8)
        assert np.isclose(m, 0.7 ** n, atol=1e-12)
    m1 = ray_moment(sz(0), 1, plan, w, xx_ring8)
    ra = ray_average(sz(0), identity(), plan, w, xx_ring8)
    assert abs(m1 - ra.average[-1]) <= 1e-12
    m2 = ray_moment(sz(0), 2, RayPlan(0.3, 1, 8.0, 0.02), w, xx_ring8, at=[1, 2, 4, 8])
    dev = np.abs(m2 - w.expect(sz(0)) ** 2)
    assert np.all(np.diff(dev) < 0)


def test_onsager_static_terms(rng):
    m = random_model(rng, n_jumps=1, scale=0.2)
    ev = Evolver(m.generator(), Window.ring(7), "dense-exponential")
    r = onsager_estimate(m, 0.5, [0.1], ev)
    w = ProductGibbsState(0.5)
    j = derive_current(m).j_total
    v = r.v
    jm = j - v * sz(0)
    oracle = sum(connected(w, translate(jm, x), jm) for x in range(-3, 4)).real
    assert math.isclose(r.static, oracle, rel_tol=1e-12)
    assert math.isclose(r.static_ring, oracle, rel_tol=1e-10)
    imb = m.hopping_imbalance()
    assert math.isclose(v, math.tanh(0.5) * imb, rel_tol=1e-12)
    assert onsager_estimate(m, 0.0, [0.1], ev).v == 0


def test_onsager_without_hopping_jumps():
    m = LindbladModel(0.8, 0.2, 0.3, ((0, 0, 0.4, -0.3, 0.2),))
    ev = Evolver(m.generator(), Window.ring(6), "dense-exponential")
    r = onsager_estimate(m, 0.6, [0.2], ev)
    assert abs(r.v) <= 1e-15
    jH = derive_current(m).j_hamiltonian
    assert abs(ProductGibbsState(0.6).expect(jH)) <= 1e-15


def test_hamiltonian_model_is_reversible():
    m = LindbladModel(0.3 + 0.1j, 0.2, 0.25, ())
    ev = Evolver(m.generator(), Window.ring(8), "dense-exponential")
    for t in (0.25, 0.5, 1.0):
        assert abs(diffusion_strengths(m, 0.5, t, ev).L_irr) <= 1e-8


def test_diffusion_strengths_examples(rng):
    m = random_model(rng, n_jumps=1, scale=0.3)
    ev = Evolver(m.generator(), Window.ring(7), "dense-exponential")
    d = diffusion_strengths(m, 0.3, 0.5, ev, density=identity())
    assert abs(d.L_norm) <= 1e-12 and abs(d.L_irr) <= 1e-12
    assert diffusion_strengths(m, 0.0, 0.5, ev).v == 0


def test_irreversible_strength_short_time_limit(rng):
    m = random_model(rng, n_jumps=2, scale=0.3)
    ev = Evolver(m.generator(), Window.ring(7), "dense-exponential")
    mu = 0.4
    w = ProductGibbsState(mu)
    # d/dt of tau_t tau*_t at t = 0 is the sum of both dissipators
    Ls = m.jump_operators()
    gen = LindbladGenerator([], Ls + [L.adjoint() for L in Ls])
    oracle = 0.0
    for x in range(-3, 4):
        Ds = lindblad_apply(sz(x), "forward", gen)
        oracle += 0.5 * x * x * connected(w, Ds, sz(0)).real
    t = 1e-4
    d = diffusion_strengths(m, mu, t, ev)
    assert d.L_irr >= -1e-9
    assert math.isclose(d.L_irr, oracle, rel_tol=1e-3)
