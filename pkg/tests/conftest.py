import numpy as np
import pytest
from hypothesis import settings, strategies as st

from qlattice.operators import LocalOperator, PauliString

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]]),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def kron_dense(A: LocalOperator, sites) -> np.ndarray:
    """Independent densification: explicit Kronecker products, first site leftmost."""
    sites = list(sites)
    out = np.zeros((2 ** len(sites),) * 2, dtype=complex)
    for s, c in A.terms.items():
        letters = dict(s.letters)
        M = np.ones((1, 1), dtype=complex)
        for site in sites:
            M = np.kron(M, PAULI[letters.get(site, "I")])
        out += c * M
    return out


def random_operator(rng, sites, n_terms=4) -> LocalOperator:
    terms = {}
    for _ in range(n_terms):
        mapping = {s: "IXYZ"[rng.integers(4)] for s in sites}
        terms[PauliString.from_dict(mapping)] = complex(rng.normal(), rng.normal())
    return LocalOperator(terms)


@st.composite
def operators(draw, sites=(0, 1, 2, 3), max_terms=5):
    n = draw(st.integers(1, max_terms))
    terms = {}
    for _ in range(n):
        word = draw(st.lists(st.sampled_from("IXYZ"), min_size=len(sites), max_size=len(sites)))
        re = draw(st.floats(-2, 2, allow_nan=False))
        im = draw(st.floats(-2, 2, allow_nan=False))
        key = PauliString.from_dict(dict(zip(sites, word)))
        terms[key] = terms.get(key, 0) + complex(re, im)
    return LocalOperator(terms)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
