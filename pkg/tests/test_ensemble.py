import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_lab import ensemble
from sparse_lab.ensemble import (
    compute_Sigma,
    compute_Z,
    cumulants_from_moments,
    derive_seed,
    make_custom_model,
    make_er_model,
    make_rademacher_model,
    sample,
)
from sparse_lab.errors import (
    DegenerateGraphError,
    DomainError,
    PreconditionError,
    RegimeError,
    SizeError,
    UnsupportedModelError,
)


# ---------------------------------------------------------------- seeds

def test_derive_seed_is_stable_and_spread():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    seeds = {derive_seed(42, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(1, 0) != derive_seed(2, 0)


@given(st.integers(0, 2**63), st.integers(0, 10**6))
def test_derive_seed_range(master, index):
    assert 0 <= derive_seed(master, index) < 2**64


@settings(max_examples=50)
@given(st.integers(2, 60))
def test_upper_triangle_index_map_is_bijective(n):
    m = n * (n + 1) // 2
    i, j = ensemble._upper_index_to_pairs(np.arange(m), n)
    ri, rj = np.triu_indices(n)
    assert np.array_equal(i, ri) and np.array_equal(j, rj)


# ------------------------------------------------------------ cumulants

def test_cumulants_of_standard_normal():
    mom = [Fraction(x) for x in (0, 1, 0, 3, 0, 15)]
    assert cumulants_from_moments(mom) == [0, 1, 0, 0, 0, 0]


@pytest.mark.parametrize("p", [0.01, 0.1, 0.37])
def test_er_fourth_and_sixth_cumulants(p):
    m = make_er_model(1000, p)
    assert m.kappa(2) == pytest.approx(1.0)
    assert m.kappa(4) == pytest.approx((1 - 6 * p + 6 * p * p) / (1 - p), rel=1e-12)
    # Bernoulli sixth cumulant p(1-p)(1 - 30 p(1-p) + 120 (p(1-p))^2)
    v = p * (1 - p)
    k6 = v * (1 - 30 * v + 120 * v * v)
    assert m.kappa(6) == pytest.approx(k6 / (p * (1 - p) ** 3), rel=1e-12)
    assert m.f == pytest.approx(math.sqrt(1000 * p / (1 - p)))


def test_rademacher_fourth_cumulant():
    N, q = 1000, 5.0
    m = make_rademacher_model(N, q)
    assert m.kappa(4) == pytest.approx(1 - 3 * q * q / N, rel=1e-12)
    assert m.kappa(3) == 0.0
    assert m.f == 0.0


def test_model_validation():
    with pytest.raises(DomainError):
        make_er_model(100, 1.5)
    with pytest.raises(RegimeError):
        make_er_model(100, 0.005)
    with pytest.raises(DomainError):
        make_rademacher_model(100, 11.0)
    with pytest.raises(DomainError):
        make_custom_model(100, [2.0])
    with pytest.raises(PreconditionError):
        make_custom_model(100, [1.0, 0.0, 1.0], q=3.0, pad=False).kappa(6)


def test_beta_and_descriptor():
    m = make_er_model(10_000, 10_000 ** (2 * 0.2 - 1))
    assert m.beta == pytest.approx(0.2)
    assert m.descriptor()["kind"] == "erdos_renyi"
    assert make_rademacher_model(100, 3.0).descriptor()["q"] == 3.0


# -------------------------------------------------------------- samples

def test_sampling_is_deterministic():
    m = make_er_model(300, 0.05)
    a, b, c = sample(m, 5), sample(m, 5), sample(m, 6)
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)
    assert not (len(a.rows) == len(c.rows) and np.array_equal(a.rows, c.rows))


@pytest.mark.parametrize(
    "model",
    [make_er_model(80, 0.1), make_er_model(80, 0.1, loops=False), make_rademacher_model(80, 3.0),
     make_custom_model(40, [1.0])],
    ids=["er", "er-noloops", "rademacher", "gaussian"],
)
def test_dense_sparse_and_matvec_agree(model):
    s = sample(model, 3)
    H = s.dense()
    assert np.array_equal(H, H.T)
    x = np.random.default_rng(0).standard_normal(model.N)
    assert np.allclose(s.matvec(x), H @ x, atol=1e-13)
    assert np.allclose(s.operator() @ x, H @ x, atol=1e-13)


def test_er_sample_entries():
    m = make_er_model(120, 0.1)
    s = sample(m, 9)
    A = s.shifted().dense()
    vals = np.unique(np.round(A * m.scale, 12))
    assert set(vals) <= {0.0, 1.0}
    H = s.dense()
    assert np.allclose(A - H, m.f / m.N)


def test_er_without_loops_keeps_centred_zero_diagonal():
    m = make_er_model(100, 0.2, loops=False)
    s = sample(m, 1)
    assert np.allclose(np.diag(s.dense()), 0.0)
    # A = H + f e e* puts p / scale on the diagonal
    assert np.allclose(np.diag(s.shifted().dense()), m.p / m.scale)


def test_custom_non_gaussian_cannot_be_sampled():
    with pytest.raises(UnsupportedModelError):
        sample(make_custom_model(50, [1.0, 0.0, 1.0]), 0)


def test_dense_cap(monkeypatch):
    s = sample(make_er_model(64, 0.2), 0)
    monkeypatch.setenv("SPARSE_LAB_DENSE_CAP", "32")
    with pytest.raises(SizeError):
        s.dense()
    assert s.dense(cap=64).shape == (64, 64)


def test_matrix_market_round_trip(tmp_path):
    s = sample(make_rademacher_model(50, 3.0), 2)
    path = tmp_path / "h.mtx"
    s.to_matrix_market(path)
    S = scipy.io.mmread(str(path)).toarray()
    assert np.allclose(S, s.dense() - s.const - s.diag_shift * np.eye(50))


# ----------------------------------------------------------- statistics

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**9), st.sampled_from(["er", "er-noloops", "rad"]))
def test_Z_matches_dense_trace(seed, kind):
    model = {
        "er": make_er_model(60, 0.15),
        "er-noloops": make_er_model(60, 0.15, loops=False),
        "rad": make_rademacher_model(60, 2.5),
    }[kind]
    s = sample(model, seed)
    H = s.dense()
    assert compute_Z(s) == pytest.approx(np.sum(H * H) / 60 - 1, abs=1e-12)


def test_Z_requires_centred_matrix():
    s = sample(make_er_model(50, 0.2), 0)
    with pytest.raises(PreconditionError):
        compute_Z(s.shifted())


@pytest.mark.parametrize("p,loops", [(0.05, True), (0.3, True), (0.1, False)])
def test_Sigma_against_entrywise_fourth_moments(p, loops):
    N = 200
    m = make_er_model(N, p, loops=loops)
    s = m.scale
    off = (p * (1 - p) ** 4 + (1 - p) * p**4) / s**4
    diag = off if loops else 0.0
    want = math.sqrt(((N * N - N) * off + N * diag) / N**2)
    sigma, proxy = compute_Sigma(m)
    assert sigma == pytest.approx(want, rel=1e-12)
    assert proxy == pytest.approx(1 / (math.sqrt(N) * m.q))


def test_Z_variance_monte_carlo():
    # Var Z = 2 Sigma^2 up to O(1/N^2) terms from the second moments
    m = make_er_model(300, 0.03)
    z = np.array([compute_Z(sample(m, derive_seed(3, i))) for i in range(600)])
    sigma, _ = compute_Sigma(m)
    var = z.var(ddof=1)
    se = var * math.sqrt(2 / (len(z) - 1))
    assert abs(z.mean()) < 4 * math.sqrt(var / len(z))
    assert abs(var - 2 * sigma**2) < 4 * se


def test_average_degree_and_rescaling():
    m = make_er_model(200, 0.05)
    s = sample(m, 4)
    A = s.shifted().dense() * m.scale
    D = ensemble.average_degree(s)
    assert D == pytest.approx(A.sum() / 200)
    hat = ensemble.rescaled_adjacency(s)
    assert hat.role == "A_hat"
    assert np.allclose(hat.dense(), A / math.sqrt(D))
    stats = ensemble.sample_stats(s)
    assert stats.D == D and stats.d == pytest.approx(200 * 0.05)


def test_rescaling_errors():
    m = make_er_model(50, 0.1)
    empty = ensemble.from_adjacency(m, [], [])
    with pytest.raises(DegenerateGraphError):
        ensemble.rescaled_adjacency(empty)
    with pytest.raises(UnsupportedModelError):
        ensemble.rescaled_adjacency(sample(make_rademacher_model(50, 2.0), 0))


def test_from_adjacency_orders_endpoints():
    m = make_er_model(10, 0.3)
    s = ensemble.from_adjacency(m, [3, 7], [1, 7])
    A = s.shifted().dense() * m.scale
    assert A[1, 3] == pytest.approx(1) and A[3, 1] == pytest.approx(1) and A[7, 7] == pytest.approx(1)
    assert A.sum() == pytest.approx(3)
