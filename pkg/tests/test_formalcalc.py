import itertools
import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_lab import ensemble
from sparse_lab.errors import ClassError, PreconditionError, SizeError
from sparse_lab.formalcalc import (
    FormalMonomial,
    SelfConsistentPolynomial,
    TermSum,
    averaging_reduce,
    build_P0,
    ceil_inv,
    collapse,
    derivative_terms,
    diagonal_projection,
    differentiate,
    evaluate_sum,
    expansion_order,
    q0_terms,
)
from walk_oracle import moments_from_terms, walk_moment

GOLDEN = Path(__file__).resolve().parent / "golden"


def G_of(n, seed=0, z=0.4 + 0.9j):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    H = (a + a.T) / math.sqrt(2 * n)
    return np.linalg.inv(H - z * np.eye(n))


# ----------------------------------------------------------- monomials

def test_factors_are_canonical():
    t = FormalMonomial(factors=((3, 1), (0, 0), (2, 1)), nu1=4)
    assert t.factors == ((0, 0), (1, 2), (1, 3))
    assert t.nu2 == 2
    assert t.sigma == 3
    assert t.labels == {0, 1, 2, 3}


def test_theta_counts_n_and_q_powers():
    t = FormalMonomial(n_pow=2, q_pow=3)
    assert t.theta(0.2) == pytest.approx(2.6)


def test_product_shifts_labels_apart():
    a = FormalMonomial(Fraction(2), (4,), 2, 1, 2, ((0, 1),))
    b = FormalMonomial(Fraction(3), (), 1, 0, 0, ((0, 0),), ulg=1)
    p = a * b
    assert p.coeff == 6
    assert p.factors == ((0, 1), (2, 2))
    assert (p.nu1, p.n_pow, p.q_pow, p.ulg, p.kappas) == (3, 1, 2, 1, (4,))


def test_termsum_merges_like_terms():
    t = FormalMonomial(factors=((0, 0),), nu1=1)
    s = TermSum.of([t, t.with_coeff(Fraction(1, 2)), t.with_coeff(-3)])
    assert len(s) == 1 and s.terms[0].coeff == Fraction(-3, 2)
    assert len(TermSum.of([t, t.with_coeff(-1)])) == 0


# ---------------------------------------------------------- derivatives

def test_first_derivative_of_single_entry():
    t = FormalMonomial(factors=((0, 1),), nu1=2)
    d = differentiate(t, (0, 1), 1)
    got = {(m.factors, m.coeff) for m in d}
    assert got == {(((0, 0), (1, 1)), Fraction(-1)), (((0, 1), (0, 1)), Fraction(-1))}


def test_raw_expansion_size():
    # each derivative of a product of s entries w.r.t. an off-diagonal entry
    # produces 2 s terms and raises the degree by one
    t = FormalMonomial(factors=((0, 1),), nu1=2)
    for k in range(1, 5):
        assert len(derivative_terms(t, (0, 1), k)) == 2**k * math.factorial(k)


def test_derivative_guard():
    t = FormalMonomial(factors=((0, 1),), nu1=2)
    with pytest.raises(SizeError):
        differentiate(t, (0, 1), 5, max_order=4)
    with pytest.raises(ValueError):
        differentiate(t, (0, 1), -1)


def test_diagonal_only_matches_projection():
    t = FormalMonomial(Fraction(1, 6), (4,), 2, 2, 2, ((0, 1),))
    for k in (1, 2, 3, 4):
        full = differentiate(t, (0, 1), k)
        diag, dropped = diagonal_projection(full)
        assert diag == differentiate(t, (0, 1), k, diagonal_only=True)
        assert all(m.nu2 > 0 for m in dropped)
        if len(dropped):
            assert dropped.discarded_bound is not None


def test_trace_power_derivative_introduces_fresh_index():
    t = FormalMonomial(ulg=2, nu1=2)
    (m,) = differentiate(t, (0, 1), 1).terms
    assert m.coeff == -4 and m.ulg == 1 and m.nu1 == 3 and m.n_pow == 1
    assert m.factors == ((0, 2), (1, 2))


@settings(max_examples=30, deadline=None)
@given(st.fractions(min_value=-5, max_value=5), st.integers(1, 3))
def test_derivative_is_linear_in_coefficient(c, k):
    t = FormalMonomial(factors=((0, 1), (1, 1)), nu1=2, ulg=1)
    base = differentiate(t, (0, 1), k)
    scaled = differentiate(t.with_coeff(c), (0, 1), k)
    assert scaled == base.scaled(c)


# ------------------------------------------------- numerical evaluation

def _loop_sum(term, G):
    n = G.shape[0]
    total = 0j
    for idx in itertools.product(range(n), repeat=term.nu1):
        p = 1 + 0j
        for a, b in term.factors:
            p *= G[idx[a], idx[b]]
        total += p
    total *= (np.trace(G) / n) ** term.ulg
    return total * float(term.coeff) * n ** (-term.n_pow)


@pytest.mark.parametrize(
    "term",
    [
        FormalMonomial(factors=((0, 0), (1, 1)), nu1=2, n_pow=2),
        FormalMonomial(factors=((0, 1), (0, 1), (2, 2)), nu1=3, n_pow=1),
        FormalMonomial(Fraction(-3, 2), (), 3, 2, 0, ((0, 1), (1, 1)), 1),
    ],
)
def test_evaluate_sum_against_explicit_loops(term):
    G = G_of(5)
    assert evaluate_sum(term, G) == pytest.approx(_loop_sum(term, G), rel=1e-12)


def test_evaluate_sum_index_guard():
    with pytest.raises(SizeError):
        evaluate_sum(FormalMonomial(nu1=4), G_of(3))


# ------------------------------------------------------------ reduction

def test_collapse_replaces_entries_by_trace():
    t = FormalMonomial(factors=((0, 0), (0, 0), (1, 1)), nu1=2, n_pow=2)
    c = collapse(t)
    assert (c.nu1, c.n_pow, c.ulg, c.factors) == (0, 0, 3, ())
    assert averaging_reduce(t, 1).terms == (c,)


def test_reduction_rejects_off_diagonal():
    with pytest.raises(ClassError):
        averaging_reduce(FormalMonomial(factors=((0, 1),), nu1=2), 2)


def test_reduction_of_single_entries_is_exact():
    # sum_x G_xx = N ulG with no corrections at any depth
    t = FormalMonomial(factors=((0, 0),), nu1=1, n_pow=1)
    for r in (1, 2, 3):
        (m,) = averaging_reduce(t, r).terms
        assert (m.coeff, m.ulg, m.n_pow, m.kappas) == (1, 1, 0, ())


def test_reduction_of_squared_entry_leading_correction():
    # G_xx moves with the row norm as m^3 (S - 1), Var S = kappa_4 / q^2,
    # so E G_xx^2 = ulG^2 + kappa_4 q^-2 ulG^6 + ...
    t = FormalMonomial(factors=((0, 0), (0, 0)), nu1=1, n_pow=1)
    out = {(m.ulg, m.q_pow, m.kappas): m.coeff for m in averaging_reduce(t, 2)}
    assert out[(2, 0, ())] == 1
    assert out[(6, 2, (4,))] == 1
    assert len(out) == 2


# ----------------------------------------------------- the polynomial

def test_ceil_inv_handles_exact_reciprocals():
    assert ceil_inv(0.2) == 5
    assert ceil_inv(0.1) == 10
    assert ceil_inv(0.3) == 4
    assert expansion_order(0.25) == 10


def test_q0_terms_frozen():
    assert q0_terms(0.2) == {
        (2, 0, ()): 1,
        (4, 2, (4,)): 1,
        (6, 4, (6,)): 1,
        (8, 4, (4, 4)): 2,
        (10, 6, (4, 6)): 4,
    }


@pytest.mark.parametrize("beta,umax,n_max", [(0.25, 2, 6), (0.2, 4, 6), (0.1, 8, 6)])
def test_moments_match_tree_walks(beta, umax, n_max):
    moments = moments_from_terms(q0_terms(beta), n_max, umax)
    for n, mom in enumerate(moments, start=1):
        assert mom == walk_moment(2 * n, umax), f"moment {2 * n}"


def test_truncation_floor_is_visible():
    # one order past the resolution the two sides differ
    mom = moments_from_terms(q0_terms(0.2), 4, 6)[3]
    walk = walk_moment(8, 6)
    assert mom != walk
    assert {k for k in set(mom) | set(walk) if mom.get(k) != walk.get(k)} == {(6, (8,))}


def test_gaussian_model_gives_semicircle():
    poly = build_P0(ensemble.make_custom_model(1000, [1.0] + [0.0] * 11, q=1000**0.2))
    assert poly.a == (1.0,) and poly.degree == 2
    assert poly(1j, 0.5j) == pytest.approx(1 + 1j * 0.5j + (0.5j) ** 2)


def test_missing_cumulants_rejected():
    model = ensemble.make_custom_model(1000, [1.0, 0.0, 0.5], q=1000**0.2, pad=False)
    with pytest.raises(PreconditionError):
        build_P0(model)


def test_er_coefficients_at_two_thousand():
    N = 2000
    p25 = build_P0(ensemble.make_er_model(N, N ** (2 * 0.25 - 1)))
    assert p25.degree == 8
    assert p25.a == pytest.approx((1.0, 0.88873, 0.0, 70.64), rel=1e-3)
    p20 = build_P0(ensemble.make_er_model(N, N ** (2 * 0.2 - 1)))
    assert p20.a == pytest.approx((1.0, 0.94783, 0.71736, 37.575, 56.877), rel=1e-4)


def test_x4_coefficient_is_fourth_cumulant():
    for k4 in (-1.5, 0.25, 3.0):
        model = ensemble.make_custom_model(500, [1.0, 0.0, k4] + [0.0] * 9, q=500**0.2)
        assert build_P0(model).a[1] == k4


@pytest.mark.parametrize("path", sorted(GOLDEN.glob("p0_*.json")), ids=lambda p: p.stem)
def test_golden_files(path):
    kind, beta = path.stem.split("_beta")
    beta = float(beta)
    N = 2000
    if kind == "p0_er":
        model = ensemble.make_er_model(N, N ** (2 * beta - 1))
    else:
        model = ensemble.make_rademacher_model(N, N**beta)
    poly = build_P0(model)
    assert poly.to_json() == path.read_text()


def test_json_round_trip_and_determinism():
    model = ensemble.make_rademacher_model(800, 800**0.25)
    a, b = build_P0(model), build_P0(model)
    assert a.to_json() == b.to_json()
    back = SelfConsistentPolynomial.from_json(a.to_json())
    assert back.to_json() == a.to_json()
    assert (back.beta, back.q, back.degree, back.a) == (a.beta, a.q, a.degree, a.a)
    assert json.loads(a.to_json())["degree"] == 8


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6),
    st.floats(0.5, 20),
    st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
)
def test_polynomial_evaluation_matches_coefficients(a, q, x):
    a = [1.0] + a
    poly = SelfConsistentPolynomial(0.2, q, 2 * len(a), tuple(a))
    z = 0.3 + 1.1j
    direct = 1 + z * x + sum(al * q ** (-2 * l) * x ** (2 * l + 2) for l, al in enumerate(a))
    via = np.polynomial.polynomial.polyval(x, poly.coefficients(z))
    assert poly(z, x) == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert via == pytest.approx(direct, rel=1e-9, abs=1e-9)
