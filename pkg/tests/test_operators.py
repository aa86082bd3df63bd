import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import PAULI, kron_dense, operators, random_operator
from qlattice.errors import SupportTooLarge
from qlattice.operators import (LocalOperator, PauliString, commutator, diameter, distance,
                                from_dense, geometry, identity, linear_combination,
                                magnetization, multiply, operator_norm, proj_down, proj_up,
                                splus, sminus, sx, sy, sz, to_dense, translate, wrap)

SITES = (0, 1, 2, 3)


def test_pauli_product_example():
    assert multiply(sx(0), sy(0)) == 1j * sz(0)
    assert np.allclose(PAULI["X"] @ PAULI["Y"], 1j * PAULI["Z"])


def test_unit_element(rng):
    A = random_operator(rng, [0, 2])
    assert multiply(identity(), A) == A
    assert multiply(A, identity()) == A


def test_disjoint_supports_commute(rng):
    A = random_operator(rng, [0])
    B = random_operator(rng, [5])
    assert (A @ B - B @ A).is_zero()
    assert commutator(A, B).is_zero()


def test_commutator_examples():
    assert commutator(sz(0), splus(0)) == 2 * splus(0)
    dense = PAULI["Z"] @ np.array([[0, 1], [0, 0]]) - np.array([[0, 1], [0, 0]]) @ PAULI["Z"]
    assert np.allclose(to_dense(commutator(sz(0), splus(0)), [0]), dense)
    assert commutator(sx(3), identity(2.0)).is_zero()


def test_ladder_and_projector_matrices():
    assert np.allclose(to_dense(splus(0), [0]), [[0, 1], [0, 0]])
    assert np.allclose(to_dense(sminus(0), [0]), [[0, 0], [1, 0]])
    assert np.allclose(to_dense(proj_up(0), [0]), [[1, 0], [0, 0]])
    assert np.allclose(to_dense(proj_down(0), [0]), [[0, 0], [0, 1]])


def test_operator_norm_examples(rng):
    assert math.isclose(operator_norm(sz(0)), 1.0)
    alpha = 0.7 - 1.3j
    A = alpha * (sx(0) @ sx(1))
    oracle = np.abs(np.linalg.eigvals(kron_dense(A, [0, 1]))).max()
    assert math.isclose(operator_norm(A), abs(alpha), rel_tol=1e-12)
    assert math.isclose(oracle, abs(alpha), rel_tol=1e-12)
    assert operator_norm(LocalOperator.zero()) == 0.0
    assert operator_norm(identity(-3.0)) == 3.0
    for _ in range(20):
        A = random_operator(rng, [0, 1, 2])
        B = random_operator(rng, [1, 3])
        assert operator_norm(A + B) <= operator_norm(A) + operator_norm(B) + 1e-12


def test_norm_limit():
    big = magnetization(range(14))
    with pytest.raises(SupportTooLarge):
        operator_norm(big)


def test_translate_examples(rng):
    assert translate(sz(0), 3) == sz(3)
    A = random_operator(rng, [0, 1, 3])
    assert translate(A, 0) == A
    assert math.isclose(operator_norm(translate(A, -7)), operator_norm(A), rel_tol=1e-12)
    assert translate(A, 4).support == tuple(s + 4 for s in A.support)


def test_wrap_on_ring():
    A = sx(5) @ sz(6)
    assert wrap(A, 0, 6) == sx(5) @ sz(0)
    assert wrap(sz(-1), 0, 4) == sz(3)


def test_geometry_examples():
    g = geometry(sz(0) @ sz(1), sz(0))
    assert g.supp_a == (0, 1) and g.diam_a == 1
    assert geometry(sz(0), sz(5)).dist == 5
    assert geometry(sx(0) @ sx(2), sz(2)).dist == 0
    assert geometry(identity(), sz(1)).dist == math.inf
    assert diameter(()) == 0
    assert distance([0, 9], [4, 6]) == 3


def test_parse_and_json_round_trip(rng):
    A = LocalOperator.from_string("X0 Z3", 2.0)
    assert A.support == (0, 3)
    assert str(A.strings()[0]) == "X0 Z3"
    B = random_operator(rng, [1, 2, 4])
    assert LocalOperator.from_json(B.to_json()) == B


def test_canonical_form():
    p = PauliString.parse("X0 Y1")
    A = LocalOperator({p: 1.0, PauliString.parse("Z2"): 0.0})
    assert A.n_terms == 1 and A.support == (0, 1)
    B = A + A - 2 * A
    assert B.is_zero()
    with pytest.raises(ValueError):
        PauliString(((1, "X"), (0, "Z")))


def test_linear_combination_pruning():
    ops = [sx(0), sz(1)]
    assert linear_combination(ops, [1.0, 1e-16], prune=1e-14) == sx(0)
    assert linear_combination(ops, [1.0, 1e-16]).n_terms == 2


@given(operators(SITES), operators(SITES))
def test_dense_homomorphism(A, B):
    lhs = kron_dense(A @ B, SITES)
    rhs = kron_dense(A, SITES) @ kron_dense(B, SITES)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)
    assert np.allclose(to_dense(A, SITES), kron_dense(A, SITES), atol=1e-14)


@given(operators(SITES), operators(SITES))
def test_adjoint_antihomomorphism(A, B):
    assert (A @ B).adjoint() == B.adjoint() @ A.adjoint()
    assert A.adjoint().adjoint() == A


@given(st.lists(st.sampled_from("IXYZ"), min_size=4, max_size=4),
       st.lists(st.sampled_from("IXYZ"), min_size=4, max_size=4))
def test_pauli_closure(w1, w2):
    P = LocalOperator({PauliString.from_dict(dict(zip(SITES, w1))): 1.0})
    Q = LocalOperator({PauliString.from_dict(dict(zip(SITES, w2))): 1.0})
    R = P @ Q
    assert R.n_terms == 1
    phase = complex(R.c[0])
    assert min(abs(phase - p) for p in (1, -1, 1j, -1j)) < 1e-15


@given(operators(SITES))
def test_canonicalization_idempotent(A):
    again = LocalOperator(A.terms)
    assert again == A
    assert again.support == A.support


@given(operators((0, 1, 2)))
def test_from_dense_round_trip(A):
    M = kron_dense(A, [0, 1, 2])
    B = from_dense(M, [0, 1, 2])
    assert np.allclose(kron_dense(B, [0, 1, 2]), M, atol=1e-12)


@given(operators((0, 2)), st.integers(-20, 20))
def test_translation_preserves_norm(A, x):
    assert math.isclose(operator_norm(translate(A, x)), operator_norm(A),
                        rel_tol=1e-10, abs_tol=1e-12)
