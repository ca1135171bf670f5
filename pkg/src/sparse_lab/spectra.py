"""Eigenvalues, resolvent traces and resolvent diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .ensemble import MatrixSample, dense_cap
from .errors import ConvergenceError, DomainError, SizeError

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class Spectrum:
    """Sorted eigenvalues.

    ``residual`` is the largest ``||M v - lam v||`` over computed pairs when
    eigenvectors were formed, otherwise the backward-error bound
    ``N * eps * ||M||`` of the dense solver.
    """

    eigenvalues: np.ndarray
    source: str
    residual: float
    vectors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def to_csv(self) -> str:
        rows = ["index,eigenvalue"] + [f"{i + 1},{float(v)!r}" for i, v in enumerate(self.eigenvalues)]
        return "\n".join(rows) + "\n"


def as_dense(x, cap: int | None = None) -> np.ndarray:
    if isinstance(x, MatrixSample):
        return x.dense(cap)
    m = np.asarray(x, dtype=float)
    cap = dense_cap() if cap is None else cap
    if m.shape[0] > cap:
        raise SizeError(f"N={m.shape[0]} exceeds dense cap {cap}; use extreme_eigs")
    return m


# --------------------------------------------------------- reference solver

def householder_tridiagonal(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduce a symmetric matrix to tridiagonal form; returns (diagonal, offdiagonal)."""
    a = np.array(m, dtype=float)
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1:, k]
        alpha = -math.copysign(np.linalg.norm(x), x[0] if x[0] != 0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vn = np.linalg.norm(v)
        if vn == 0.0:
            continue
        v /= vn
        sub = a[k + 1:, k + 1:]
        p = sub @ v
        w = p - (v @ p) * v
        sub -= 2.0 * (np.outer(v, w) + np.outer(w, v))
        a[k + 1:, k] = 0.0
        a[k, k + 1:] = 0.0
        a[k + 1, k] = a[k, k + 1] = alpha
    return np.diag(a).copy(), np.diag(a, 1).copy()


def tridiagonal_ql(d: np.ndarray, e: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal matrix by QL with implicit Wilkinson shifts."""
    d = np.array(d, dtype=float)
    n = len(d)
    e = np.append(np.array(e, dtype=float), 0.0)
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_sweeps:
                raise ConvergenceError("QL iteration did not converge", abs(e[l]))
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            else:
                d[l] -= p
                e[l] = g
                e[m] = 0.0
    return np.sort(d)


# ------------------------------------------------------------- full spectra

def full_spectrum(x, *, vectors: bool = False, method: str = "lapack", cap: int | None = None) -> Spectrum:
    """All eigenvalues of a sample or a dense symmetric matrix.

    ``method="householder"`` runs the reference tridiagonal-QL solver
    (eigenvalues only, meant for small matrices).
    """
    m = as_dense(x, cap)
    norm = float(np.abs(m).sum(axis=1).max()) if m.size else 0.0
    if method == "householder":
        if vectors:
            raise ValueError("the reference solver computes eigenvalues only")
        lam = tridiagonal_ql(*householder_tridiagonal(m))
        return Spectrum(lam, "dense", m.shape[0] * _EPS * max(norm, 1.0))
    if method != "lapack":
        raise ValueError(f"unknown method {method!r}")
    if not vectors:
        lam = scipy.linalg.eigvalsh(m, check_finite=False)
        return Spectrum(lam, "dense", m.shape[0] * _EPS * max(norm, 1.0))
    lam, u = scipy.linalg.eigh(m, check_finite=False)
    res = float(np.linalg.norm(m @ u - u * lam, axis=0).max()) if len(lam) else 0.0
    return Spectrum(lam, "dense", res, u)


# -------------------------------------------------------- iterative solver

def _orthogonalize(w: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = basis.T @ w
    w = w - basis @ h
    h2 = basis.T @ w
    return w - basis @ h2, h + h2


def lanczos_extreme(
    matvec,
    n: int,
    k: int,
    side: str = "top",
    *,
    ncv: int | None = None,
    tol: float = 1e-10,
    max_restarts: int = 5,
    seed: int = 0,
) -> Spectrum:
    """Thick-restart Lanczos with full reorthogonalization.

    Keeps the wanted Ritz vectors plus half of the remaining subspace at
    each restart (Krylov-Schur form).  Converged when every wanted Ritz
    pair has residual below ``tol * max(1, |theta|)``.
    """
    if side not in ("top", "bottom"):
        raise ValueError("side must be 'top' or 'bottom'")
    m = min(n, ncv or 4 * k + 40)
    if k > m:
        raise ValueError("k exceeds the subspace size")
    sign = 1.0 if side == "top" else -1.0
    rng = np.random.default_rng(seed)
    V = np.zeros((n, m + 1))
    T = np.zeros((m, m))
    v0 = rng.standard_normal(n)
    V[:, 0] = v0 / np.linalg.norm(v0)
    start = 0
    best = math.inf
    for _ in range(max_restarts + 1):
        beta = 0.0
        for j in range(start, m):
            w = sign * matvec(V[:, j])
            w, h = _orthogonalize(w, V[:, : j + 1])
            T[: j + 1, j] = h
            T[j, : j + 1] = h
            beta = float(np.linalg.norm(w))
            if beta <= 1e-14 * max(1.0, abs(h[j])):
                # invariant subspace: continue with a fresh orthogonal direction
                w, _ = _orthogonalize(rng.standard_normal(n), V[:, : j + 1])
                V[:, j + 1] = w / np.linalg.norm(w)
                beta = 0.0
            else:
                V[:, j + 1] = w / beta
            if j + 1 < m:
                T[j + 1, j] = T[j, j + 1] = beta
        theta, S = np.linalg.eigh(T)
        order = np.argsort(theta)[::-1]
        theta, S = theta[order], S[:, order]
        res = np.abs(beta * S[m - 1, :k])
        scale = np.maximum(1.0, np.abs(theta[:k]))
        best = min(best, float(np.max(res / scale)))
        if np.all(res <= tol * scale) or m == n:
            vecs = V[:, :m] @ S[:, :k]
            lam = sign * theta[:k]
            true_res = max(
                float(np.linalg.norm(matvec(vecs[:, i]) - lam[i] * vecs[:, i])) for i in range(k)
            )
            idx = np.argsort(lam)
            return Spectrum(lam[idx], "iterative_topk", true_res, vecs[:, idx])
        keep = min(m - 1, k + (m - k) // 2)
        V[:, :keep] = V[:, :m] @ S[:, :keep]
        V[:, keep] = V[:, m]
        T = np.zeros((m, m))
        T[np.arange(keep), np.arange(keep)] = theta[:keep]
        T[keep, :keep] = T[:keep, keep] = beta * S[m - 1, :keep]
        start = keep
    raise ConvergenceError(f"Lanczos did not converge after {max_restarts} restarts", best)


def extreme_eigs(x, k: int = 1, side: str = "top", **kw) -> Spectrum:
    """k extreme eigenvalues (ascending) of a sample or symmetric matrix."""
    if k > 8:
        raise ValueError("k must be at most 8")
    if isinstance(x, MatrixSample):
        return lanczos_extreme(x.matvec, x.N, k, side, **kw)
    m = np.asarray(x, dtype=float)
    return lanczos_extreme(lambda v: m @ v, m.shape[0], k, side, **kw)


# ----------------------------------------------------- resolvent functions

@dataclass(frozen=True)
class GreenEvaluation:
    z: complex
    ulG: complex
    Gamma: float

    @property
    def im_ulG(self) -> float:
        return self.ulG.imag

    def to_record(self) -> dict:
        return {
            "z_re": self.z.real,
            "z_im": self.z.imag,
            "ulG_re": self.ulG.real,
            "ulG_im": self.ulG.imag,
            "gamma": self.Gamma,
        }


def stieltjes(spectrum, z: complex) -> GreenEvaluation:
    """Normalized resolvent trace (1/N) sum 1/(lam - z) and Gamma = Im / (N eta)."""
    z = complex(z)
    if z.imag <= 0:
        raise DomainError("Im z must be positive")
    lam = spectrum.eigenvalues if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
    n = len(lam)
    g = complex(np.mean(1.0 / (lam - z)))
    return GreenEvaluation(z, g, g.imag / (n * z.imag))


def green_matrix(spectrum: Spectrum, z: complex) -> np.ndarray:
    """Dense resolvent U diag(1/(lam - z)) U^T from an eigendecomposition."""
    u = spectrum.vectors
    if u is None:
        raise ValueError("spectrum carries no eigenvectors")
    return (u / (spectrum.eigenvalues - z)) @ u.T


def ward_check(x, z: complex, probe_rows=None, spectrum: Spectrum | None = None) -> float:
    """Largest relative violation of sum_j |G_ij|^2 = Im G_ii / eta over probe rows."""
    z = complex(z)
    if z.imag <= 0:
        raise DomainError("Im z must be positive")
    spec = spectrum or full_spectrum(x, vectors=True)
    G = green_matrix(spec, z)
    rows = np.arange(G.shape[0]) if probe_rows is None else np.asarray(probe_rows)
    lhs = np.sum(np.abs(G[rows]) ** 2, axis=1)
    rhs = G[rows, rows].imag / z.imag
    return float(np.max(np.abs(lhs - rhs) / rhs))


def delocalization_check(x, spectrum: Spectrum | None = None) -> float:
    """max over eigenvectors and coordinates of N u_i(k)^2."""
    spec = spectrum or full_spectrum(x, vectors=True)
    u = spec.vectors
    return float(u.shape[0] * np.max(u * u))
