import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_lab import ensemble, spectra
from sparse_lab.errors import ConvergenceError, DomainError, SizeError


def _sturm_count(d, e, x):
    """Number of eigenvalues of the tridiagonal (d, e) below x."""
    count, q = 0, 1.0
    for i in range(len(d)):
        off = e[i - 1] ** 2 if i else 0.0
        q = d[i] - x - (off / q if i else 0.0)
        if q == 0.0:
            q = 1e-300
        count += q < 0
    return count


def _bisection_eigs(d, e):
    """Eigenvalues by Sturm-sequence bisection (independent oracle)."""
    r = max(abs(d[i]) + (abs(e[i - 1]) if i else 0) + (abs(e[i]) if i < len(e) else 0) for i in range(len(d)))
    out = []
    for k in range(len(d)):
        lo, hi = -r - 1, r + 1
        for _ in range(200):
            mid = (lo + hi) / 2
            if _sturm_count(d, e, mid) > k:
                hi = mid
            else:
                lo = mid
        out.append((lo + hi) / 2)
    return np.array(out)


def _sym(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return (a + a.T) / math.sqrt(2 * n)


# ---------------------------------------------------------- dense paths

@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10**6))
def test_householder_ql_matches_lapack(n, seed):
    m = _sym(n, seed)
    ref = spectra.full_spectrum(m, method="householder").eigenvalues
    assert np.allclose(ref, np.linalg.eigvalsh(m), atol=1e-12)


def test_tridiagonal_ql_against_sturm_bisection():
    rng = np.random.default_rng(3)
    d, e = rng.standard_normal(25), rng.standard_normal(24)
    assert np.allclose(spectra.tridiagonal_ql(d, e), _bisection_eigs(d, e), atol=1e-11)


def test_householder_preserves_spectrum_moments():
    m = _sym(12, 1)
    d, e = spectra.householder_tridiagonal(m)
    assert d.sum() == pytest.approx(np.trace(m))
    assert (d**2).sum() + 2 * (e**2).sum() == pytest.approx(np.sum(m * m))


def test_full_spectrum_vectors_and_residual():
    s = ensemble.sample(ensemble.make_er_model(60, 0.1), 0)
    spec = spectra.full_spectrum(s, vectors=True)
    assert spec.residual < 1e-12
    assert spec.vectors.shape == (60, 60)
    assert np.all(np.diff(spec.eigenvalues) >= 0)
    assert spec.to_csv().splitlines()[0] == "index,eigenvalue"
    assert len(spec) == 60


def test_eigenvalue_only_residual_is_backward_bound():
    m = _sym(40, 2)
    spec = spectra.full_spectrum(m)
    assert 0 < spec.residual < 1e-12
    with pytest.raises(ValueError):
        spectra.full_spectrum(m, vectors=True, method="householder")
    with pytest.raises(ValueError):
        spectra.full_spectrum(m, method="magic")


def test_dense_cap_enforced():
    with pytest.raises(SizeError):
        spectra.full_spectrum(np.eye(10), cap=5)


# ---------------------------------------------------------- Lanczos

@pytest.mark.parametrize("side", ["top", "bottom"])
def test_lanczos_matches_dense(side):
    s = ensemble.sample(ensemble.make_er_model(800, 0.02), 1)
    lam = spectra.full_spectrum(s.shifted()).eigenvalues
    got = spectra.extreme_eigs(s.shifted(), 3, side, max_restarts=60)
    want = lam[-3:] if side == "top" else lam[:3]
    assert np.allclose(got.eigenvalues, want, atol=1e-9)
    assert got.source == "iterative_topk"
    assert got.residual < 1e-8


def test_lanczos_small_matrix_exhausts_space():
    m = _sym(6, 4)
    got = spectra.extreme_eigs(m, 2)
    assert np.allclose(got.eigenvalues, np.linalg.eigvalsh(m)[-2:])


def test_lanczos_reports_best_residual_on_failure():
    s = ensemble.sample(ensemble.make_er_model(3000, 0.003), 2)
    with pytest.raises(ConvergenceError) as info:
        spectra.lanczos_extreme(s.matvec, s.N, 4, ncv=12, max_restarts=0, tol=1e-14)
    assert info.value.best_residual > 0


def test_extreme_eigs_limits():
    with pytest.raises(ValueError):
        spectra.extreme_eigs(np.eye(20), 9)
    with pytest.raises(ValueError):
        spectra.lanczos_extreme(lambda v: v, 10, 1, "middle")


# ------------------------------------------------------------ resolvent

def test_stieltjes_matches_trace_of_inverse():
    m = _sym(30, 5)
    spec = spectra.full_spectrum(m)
    z = 0.2 + 0.3j
    g = spectra.stieltjes(spec, z)
    direct = np.trace(np.linalg.inv(m - z * np.eye(30))) / 30
    assert g.ulG == pytest.approx(direct, rel=1e-12)
    assert g.Gamma == pytest.approx(direct.imag / (30 * 0.3))
    assert set(g.to_record()) == {"z_re", "z_im", "ulG_re", "ulG_im", "gamma"}
    with pytest.raises(DomainError):
        spectra.stieltjes(spec, 1.0)


def test_stieltjes_far_field():
    # ulG(z) ~ -1/z for large |z| when the spectrum is bounded
    spec = spectra.full_spectrum(_sym(50, 6))
    z = 1e6j
    assert spectra.stieltjes(spec, z).ulG == pytest.approx(-1 / z, rel=1e-5)


@pytest.mark.parametrize("z", [1j, 0.5 + 0.1j, -1.2 + 0.05j])
def test_ward_identity(z):
    s = ensemble.sample(ensemble.make_rademacher_model(50, 3.0), 7)
    assert spectra.ward_check(s, z) < 1e-10
    with pytest.raises(DomainError):
        spectra.ward_check(s, 0.5)


def test_green_matrix_needs_vectors():
    spec = spectra.full_spectrum(_sym(5, 0))
    with pytest.raises(ValueError):
        spectra.green_matrix(spec, 1j)


def test_delocalization_bounds():
    spec = spectra.full_spectrum(np.eye(8), vectors=True)
    assert spectra.delocalization_check(None, spec) == pytest.approx(8.0)
    s = ensemble.sample(ensemble.make_custom_model(200, [1.0]), 0)
    assert 1.0 < spectra.delocalization_check(s) < 40
