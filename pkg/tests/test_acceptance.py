"""Acceptance criteria, each run at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are also collected in the
terminal summary.
"""
import itertools
import math
import time

import mpmath
import numpy as np
import scipy.stats
import sympy

from conftest import random_operator
from qlattice.cumulants import (MomentFunctional, classical_cumulant, cumulant_decay_scan,
                                cumulant_table, cumulants_to_moments, enumerate_partitions,
                                free_cumulant)
from qlattice.dynamics import Evolver, LindbladGenerator, Window, evolve_lindblad, xx_interaction
from qlattice.lieb_robinson import (LightConeGrid, commutator_norm_grid, fit_light_cone,
                                    theoretical_velocity)
from qlattice.open_chain import (LindbladModel, derive_current, equilibrium_report,
                                 gibbs_stationarity_residual, lower_bound, random_model)
from qlattice.operators import splus, sx, sz
from qlattice.states import ProductGibbsState
from qlattice.transport import (ChargeBasis, ExtensiveVector, RayPlan, diffusion_strengths,
                                euler_correlator, onsager_estimate, project_onto_charges,
                                ray_average)

XX = xx_interaction(1.0)
DEPHASED_XX = LindbladModel(1.0, 0.0, 0.0, ((0, 0, 0.5, 0, 0),))


def test_gibbs_stationarity(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3):
        m = random_model(rng, scale=0.5)
        for mu in (0.0, 0.5, 1.0):
            worst = max(worst, gibbs_stationarity_residual(m, mu, 6))
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 10
    acceptance(1, ok, f"max residual {worst:.2e} (<= 1e-10), {elapsed:.1f} s")
    assert worst <= 1e-10
    assert elapsed < 10


def test_current_identities(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(12)
    cons = closed = 0.0
    for _ in range(100):
        cp = derive_current(random_model(rng, n_jumps=int(rng.integers(1, 4))))
        cons = max(cons, cp.conservation_residual)
        closed = max(closed, cp.closed_form_residual)
    elapsed = time.time() - t0
    ok = cons <= 1e-12 and closed <= 1e-12 and elapsed < 5
    acceptance(2, ok, f"conservation {cons:.1e}, closed form {closed:.1e}, {elapsed:.1f} s")
    assert cons <= 1e-12
    assert closed <= 1e-12
    assert elapsed < 5


def test_equilibrium_closed_forms(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(20):
        m = random_model(rng, n_jumps=int(rng.integers(1, 4)))
        mu = float(rng.uniform(-2, 2))
        jL = derive_current(m).j_lindblad
        want = sum(abs(b) ** 2 - abs(a) ** 2 for a, b, *_ in m.jumps) / (2 * math.cosh(mu) ** 2)
        worst = max(worst, abs(ProductGibbsState(mu).expect(jL) - want))
    hop = LindbladModel(0, 0, 0, ((1, 0, 0, 0, 0),))
    mpmath.mp.dps = 30
    ref = float(1 / (64 * mpmath.e * mpmath.zeta(2)))
    bound_err = abs(equilibrium_report(hop, 0.0).L_lower - ref)
    balanced = LindbladModel(0.5, 0.1, 0.2, ((0.6, 0.6j, 0.1, 0.3, 0.2), (0.3, -0.3, 0, 0, 1)))
    iff = lower_bound(balanced, 0.4) == 0.0 and all(
        lower_bound(m, 0.4) > 0 for m in (random_model(rng) for _ in range(5)))
    elapsed = time.time() - t0
    ok = worst <= 1e-12 and bound_err <= 1e-9 and iff and elapsed < 1
    acceptance(3, ok, f"trace vs closed form {worst:.1e}, L_lower error {bound_err:.1e}, "
               f"zero iff balanced hopping: {iff}, {elapsed:.2f} s")
    assert worst <= 1e-12
    assert bound_err <= 1e-9
    assert iff
    assert elapsed < 1


def test_green_kubo_decomposition(acceptance):
    t0 = time.time()
    times = [0.25, 0.5, 1.0]
    m = random_model(np.random.default_rng(1), n_jumps=1, scale=0.15)
    ev = Evolver(m.generator(), Window.ring(8), "dense-rk4", dt=0.005)
    res = onsager_estimate(m, 0.5, times, ev)
    identity = float(res.identity_residual.max())
    ham = LindbladModel(0.3 + 0.1j, 0.2, 0.25, ())
    ev_h = Evolver(ham.generator(), Window.ring(8), "dense-rk4", dt=0.005)
    irr = max(abs(diffusion_strengths(ham, 0.5, t, ev_h).L_irr) for t in (0.1, 0.5, 1.0))
    elapsed = time.time() - t0
    ok = identity <= 1e-6 and irr <= 1e-8 and elapsed < 300
    acceptance(4, ok, f"|L - (L_norm - L_irr)| = {identity:.1e} (<= 1e-6), "
               f"reversible L_irr {irr:.1e} (<= 1e-8), {elapsed:.0f} s")
    assert identity <= 1e-6
    assert irr <= 1e-8
    assert elapsed < 300


def _brute_force_count(n, noncrossing):
    count = 0
    for labels in itertools.product(range(n), repeat=n):
        if labels[0] != 0 or any(labels[i] > max(labels[:i]) + 1 for i in range(1, n)):
            continue
        if noncrossing and any(labels[a] == labels[c] != labels[b] == labels[d]
                               for a, b, c, d in itertools.combinations(range(n), 4)):
            continue
        count += 1
    return count


def test_cumulant_combinatorics(acceptance):
    t0 = time.time()
    counts_ok = all(
        len(enumerate_partitions(n, "all")) == sympy.bell(n) == _brute_force_count(n, False)
        and len(enumerate_partitions(n, "noncrossing")) == sympy.catalan(n)
        == _brute_force_count(n, True)
        for n in range(1, 9))
    rng = np.random.default_rng(15)
    trip = 0.0
    agree = 0.0
    for n in range(1, 7):
        for _ in range(10):
            table = {S: complex(rng.normal(), rng.normal())
                     for k in range(1, n + 1) for S in itertools.combinations(range(n), k)}
            m = MomentFunctional.from_table(n, table)
            for kind in ("classical", "free"):
                back = cumulants_to_moments(cumulant_table(m, kind), n, kind)
                trip = max(trip, abs(back - table[tuple(range(n))]))
            if n <= 3:
                agree = max(agree, abs(free_cumulant(m) - classical_cumulant(m)))
    state = ProductGibbsState(0.6)
    mixed = 0.0
    for n in (2, 3, 4):
        for _ in range(5):
            ops = [random_operator(rng, [3 * i, 3 * i + 1]) for i in range(n)]
            mixed = max(mixed, abs(classical_cumulant(state, ops)))
    elapsed = time.time() - t0
    ok = counts_ok and trip <= 1e-12 and agree <= 1e-12 and mixed <= 1e-12 and elapsed < 30
    acceptance(5, ok, f"Bell/Catalan n<=8: {counts_ok}, round trip {trip:.1e}, "
               f"|kappa-c| n<=3 {agree:.1e}, disjoint mixed {mixed:.1e}, {elapsed:.1f} s")
    assert counts_ok
    assert trip <= 1e-12
    assert agree <= 1e-12
    assert mixed <= 1e-12
    assert elapsed < 30


def test_light_cone(acceptance):
    t0 = time.time()
    ev = Evolver(DEPHASED_XX.generator(), Window.interval(0, 11), "ode-rk4", dt=0.01,
                 term_budget=1_000_000)
    times = [0.1, 0.2, 0.25, 0.3, 0.4, 0.5]
    grid = commutator_norm_grid(sz(2), sz(2), range(8), times, ev)
    grid.metadata["v_theory"] = theoretical_velocity(DEPHASED_XX)
    fit = fit_light_cone(grid)
    xs = np.asarray(grid.displacements)
    r2 = {}
    for t in (0.25, 0.5):
        j = times.index(t)
        xc = fit.residuals["crossing_positions"][fit.residuals["crossing_times"].index(t)]
        mask = (xs > xc) & (grid.values[:, j] > 0)
        r2[t] = scipy.stats.linregress(xs[mask], np.log(grid.values[mask, j])).rvalue ** 2
    sx_ = np.arange(20)
    st_ = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
    planted = LightConeGrid(sx_, st_, np.minimum(1.0, np.exp(-(sx_[:, None] - 2.0 * st_))))
    syn = fit_light_cone(planted)
    syn_ok = abs(syn.v_fit - 2.0) <= 0.1 and abs(syn.lambda_fit - 1.0) <= 0.05
    elapsed = time.time() - t0
    ok = (min(r2.values()) >= 0.95 and fit.v_fit <= fit.v_theory and syn_ok and elapsed < 600)
    acceptance(6, ok, f"tail R^2 {min(r2.values()):.4f} (>= 0.95), v_fit {fit.v_fit:.2f} <= "
               f"{fit.v_theory:.2f}, synthetic within 5%: {syn_ok}, {elapsed:.0f} s")
    assert min(r2.values()) >= 0.95
    assert fit.v_fit <= fit.v_theory
    assert syn_ok
    assert elapsed < 600


def test_clustering_trend(acceptance):
    t0 = time.time()
    ev = Evolver(DEPHASED_XX.generator(), Window.interval(0, 11), "ode-rk4", dt=0.01,
                 term_budget=1_000_000)
    state = ProductGibbsState(0.5)
    ops = [sx(1), sx(1), sz(1)]
    schedule = [(0, z, 2 * z) for z in range(1, 5)]
    at_zero = cumulant_decay_scan(state, None, ops, schedule, (0, 0, 0))
    zeros = all(r["abs_cumulant"] == 0 for r in at_zero.rows)
    scan = cumulant_decay_scan(state, ev, ops, schedule, (0.5, 0, 0))
    vals = [r["abs_cumulant"] for r in scan.rows]
    # a pair of values at the clamp level carries no slope information
    decreasing = all(b < a or max(a, b) < 1e-14 for a, b in zip(vals, vals[1:]))
    elapsed = time.time() - t0
    ok = zeros and decreasing and elapsed < 600
    acceptance(7, ok, f"t=0 exact zeros: {zeros}, |c3| at t=0.5: "
               + ", ".join(f"{v:.1e}" for v in vals) + f", {elapsed:.1f} s")
    assert zeros
    assert decreasing
    assert elapsed < 600


def test_ray_average_trend(acceptance):
    t0 = time.time()
    gen = LindbladGenerator.from_interaction(XX)
    ring = Evolver(gen, Window.ring(12), "dense-exponential")
    state = ProductGibbsState(0.0)
    ratios = {}
    for v in (0.3, 0.7):
        res = ray_average(sz(0), sz(0), RayPlan(v, 1, 8.0, 0.02), state, ring)
        ratios[v] = abs(res.at(8.0) - res.target) / abs(res.at(1.0) - res.target)
    trend = all(r <= 0.1 for r in ratios.values())
    # faster than the Lieb-Robinson velocity, initially disjoint supports
    v_fast = 1.1 * theoretical_velocity(LindbladModel(1.0))
    opened = Evolver(gen, Window.interval(0, 11), "dense-exponential")
    w = ProductGibbsState(0.5)
    fast = ray_average(sz(3), sz(2), RayPlan(v_fast, 1, 1.0, 0.001), w, opened,
                       on_exit="truncate")
    tail = float(np.max(np.abs(fast.integrand - fast.target)))
    fast_ok = tail <= 1e-3
    elapsed = time.time() - t0
    ok = trend and fast_ok and elapsed < 900
    acceptance(8, ok, f"|avg(8)-target| / |avg(1)-target| = {ratios[0.3]:.3f} (v=0.3), "
               f"{ratios[0.7]:.3f} (v=0.7), required <= 0.1; "
               f"v > v_LR deviation {tail:.1e} (<= 1e-3), {elapsed:.0f} s")
    assert fast_ok
    assert elapsed < 900
    assert trend, f"ratios {ratios} exceed 0.1"


def test_hydrodynamic_projection(acceptance):
    t0 = time.time()
    state = ProductGibbsState(0.0)
    basis = ChargeBasis.from_densities([sz(0), XX.templates()[-1]], state)
    psd = basis.min_eigenvalue() >= -1e-10
    rng = np.random.default_rng(19)
    idem = 0.0
    for _ in range(5):
        a = ExtensiveVector(random_operator(rng, [0, 1], 6), 0.0, 3)
        p1 = project_onto_charges(a, basis, state)
        p2 = project_onto_charges(ExtensiveVector(p1.projected_density, 0.0, 3), basis, state)
        idem = max(idem, float(np.abs(p1.coefficients - p2.coefficients).max()))
    ev = Evolver(LindbladGenerator.from_interaction(XX), Window.ring(12), "dense-exponential")
    conserved = euler_correlator(sz(0), sz(0), 0.0, 0.0, 1.0, 8.0, state, ev, basis=basis)
    cons_res = float(np.abs(conserved.residual).max())
    plain = euler_correlator(sx(0), sx(0), 0.0, 0.0, 1.0, 8.0, state, ev, basis=basis)
    ratio = abs(plain.at(8.0, "residual")) / abs(plain.at(1.0, "value"))
    elapsed = time.time() - t0
    ok = psd and idem <= 1e-12 and cons_res <= 1e-9 and ratio <= 0.2 and elapsed < 900
    acceptance(9, ok, f"Gram PSD: {psd}, idempotence {idem:.1e}, conserved residual "
               f"{cons_res:.1e}, non-conserved ratio {ratio:.3f} (<= 0.2), {elapsed:.0f} s")
    assert psd
    assert idem <= 1e-12
    assert cons_res <= 1e-9
    assert ratio <= 0.2
    assert elapsed < 900


def test_dephasing_oracle(acceptance):
    t0 = time.time()
    c = 0.35 + 0.4j
    rate = 2 * abs(c) ** 2
    gen = LindbladGenerator([], [c * sz(0)])
    errors = {}
    for method in ("dense-exponential", "dense-rk4", "ode-rk4"):
        ev = Evolver(gen, Window.interval(0, 0), method, dt=0.01)
        worst = 0.0
        for t in (0.5, 1.0, 2.0):
            key = splus(0).strings()[0]
            ratio = evolve_lindblad(splus(0), t, "forward", ev).terms[key] / splus(0).terms[key]
            worst = max(worst, abs(-math.log(abs(ratio)) / t - rate))
        errors[method] = worst
    elapsed = time.time() - t0
    ok = max(errors.values()) <= 1e-8 and elapsed < 1
    acceptance(10, ok, "rate error " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
               + f" (<= 1e-8), {elapsed:.2f} s")
    assert max(errors.values()) <= 1e-8
    assert elapsed < 1
