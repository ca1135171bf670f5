"""Sparse symmetric random-matrix ensembles described by their cumulants.

A model fixes the law of the entries of ``H`` (centred, variance 1/N,
k-th cumulant ``kappa_k / (N q^(k-2))``) and the rank-one shift
``A = H + f e e*``.  Samples store ``H`` as

    H = S + const * J + diag_shift * I

where ``S`` is a list of upper-triangular nonzeros and ``J`` is the
all-ones matrix.  For Erdos-Renyi graphs ``S`` is the adjacency pattern
divided by ``sqrt(Np(1-p))`` so that both ``H`` and ``A`` stay sparse.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .errors import (
    DegenerateGraphError,
    DomainError,
    PreconditionError,
    RegimeError,
    SizeError,
    UnsupportedModelError,
)

KINDS = ("erdos_renyi", "sparse_rademacher", "custom")

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to (master_seed, index).

    Gives each sample an independent 64-bit seed that depends only on the
    pair, so any scheduling of samples reproduces the same draws.
    """
    z = (master_seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def dense_cap() -> int:
    return int(os.environ.get("SPARSE_LAB_DENSE_CAP", "4096"))


def cumulants_from_moments(moments: list[Fraction]) -> list[Fraction]:
    """Cumulants k_1..k_n from raw moments m_1..m_n (``moments[0]`` is m_1)."""
    kap: list[Fraction] = []
    for n in range(1, len(moments) + 1):
        c = moments[n - 1]
        for m in range(1, n):
            c -= math.comb(n - 1, m - 1) * kap[m - 1] * moments[n - m - 1]
        kap.append(c)
    return kap


def default_kmax(beta: float) -> int:
    return 2 * math.ceil(1.0 / beta - 1e-9) + 4


@dataclass(frozen=True)
class CumulantModel:
    """Entry law of a sparse matrix ensemble.

    ``kappas[k - 2]`` is the normalized off-diagonal cumulant of order k
    (so ``kappas[0] == 1``); ``diag_kappas`` is the same for diagonal
    entries.  ``p`` is set for Erdos-Renyi models only.
    """

    N: int
    q: float
    kappas: tuple[float, ...]
    diag_kappas: tuple[float, ...]
    f: float = 0.0
    kind: str = "custom"
    p: float | None = None
    loops: bool = True
    kappa_bounds: tuple[float, ...] = ()

    def __post_init__(self):
        if self.N < 1:
            raise DomainError("N must be positive")
        if not 1.0 <= self.q <= math.sqrt(self.N) * (1 + 1e-12):
            raise DomainError(f"q={self.q} outside [1, sqrt(N)]")
        if self.kind not in KINDS:
            raise DomainError(f"unknown kind {self.kind!r}")
        if not self.kappas or self.kappas[0] != 1.0:
            raise DomainError("second normalized cumulant must equal 1")
        if self.f < 0:
            raise DomainError("f must be nonnegative")
        if not self.kappa_bounds:
            object.__setattr__(self, "kappa_bounds", tuple(abs(k) for k in self.kappas))

    @property
    def beta(self) -> float:
        return math.log(self.q) / math.log(self.N) if self.N > 1 else 0.5

    @property
    def K_max(self) -> int:
        return len(self.kappas) + 1

    def kappa(self, k: int) -> float:
        if k == 1:
            return 0.0
        if not 2 <= k <= self.K_max:
            raise PreconditionError(f"cumulant of order {k} not available (K_max={self.K_max})")
        return self.kappas[k - 2]

    def kappa_bound(self, k: int) -> float:
        return self.kappa_bounds[k - 2]

    def cumulant(self, k: int, diagonal: bool = False) -> float:
        """Unnormalized cumulant of an entry of H."""
        table = self.diag_kappas if diagonal else self.kappas
        if k == 1:
            return 0.0
        return table[k - 2] / (self.N * self.q ** (k - 2))

    def fourth_moment(self, diagonal: bool = False) -> float:
        c2 = self.cumulant(2, diagonal)
        return self.cumulant(4, diagonal) + 3 * c2 * c2

    @property
    def scale(self) -> float:
        """sqrt(Np(1-p)) for Erdos-Renyi models."""
        if self.p is None:
            raise UnsupportedModelError("scale is defined for Erdos-Renyi models only")
        return math.sqrt(self.N * self.p * (1 - self.p))

    def descriptor(self) -> dict:
        d = {"kind": self.kind, "N": self.N, "loops": self.loops, "seed_policy": "splitmix64"}
        if self.p is not None:
            d["p"] = self.p
        else:
            d["q"] = self.q
        return d


def _er_normalized_kappas(p: float, kmax: int) -> tuple[float, ...]:
    # kappa_k = (Bernoulli cumulant) / (p (1 - p)^(k/2)); the half-integer
    # power is applied in floating point after the exact rational part.
    pf = Fraction(p)
    mom = [pf * (1 - pf) ** k + (1 - pf) * (-pf) ** k for k in range(1, kmax + 1)]
    cum = cumulants_from_moments(mom)
    return tuple(
        float(cum[k - 1] / (pf * (1 - pf) ** (k // 2))) / math.sqrt(1 - p) ** (k % 2)
        for k in range(2, kmax + 1)
    )


def make_er_model(N: int, p: float, *, loops: bool = True, kmax: int | None = None) -> CumulantModel:
    """Erdos-Renyi graph G(N, p) with H = (adjacency - p J) / sqrt(Np(1-p))."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"p={p} outside (0, 1)")
    if N * p < 1.0:
        raise RegimeError(f"Np={N * p} < 1")
    q = math.sqrt(N * p)
    kmax = kmax or default_kmax(math.log(q) / math.log(N))
    kap = _er_normalized_kappas(p, kmax)
    diag = kap if loops else (0.0,) * len(kap)
    f = math.sqrt(N * p / (1 - p))
    return CumulantModel(N, q, kap, diag, f, "erdos_renyi", p, loops)


def make_rademacher_model(N: int, q: float, *, kmax: int | None = None) -> CumulantModel:
    """Entries are +-1/q with probability q^2/(2N) each and 0 otherwise."""
    if q > math.sqrt(N) * (1 + 1e-12):
        raise DomainError(f"q={q} exceeds sqrt(N)")
    if q < 1:
        raise DomainError("q must be at least 1")
    r = Fraction(q * q / N)
    kmax = kmax or default_kmax(math.log(q) / math.log(N) if N > 1 else 0.5)
    mom = [r if k % 2 == 0 else Fraction(0) for k in range(1, kmax + 1)]
    cum = cumulants_from_moments(mom)
    kap = tuple(float(cum[k - 1] / r) for k in range(2, kmax + 1))
    return CumulantModel(N, q, kap, kap, 0.0, "sparse_rademacher")


def make_custom_model(
    N: int,
    kappas,
    q: float | None = None,
    f: float = 0.0,
    *,
    pad: bool = True,
) -> CumulantModel:
    """Model with prescribed normalized cumulants (``kappas`` starts at order 2).

    With ``pad`` the list is extended by zeros to the default K_max.  Only
    the Gaussian case (all higher cumulants zero) can be sampled.
    """
    q = math.sqrt(N) if q is None else q
    kap = tuple(float(k) for k in kappas)
    if pad:
        kmax = default_kmax(math.log(q) / math.log(N))
        kap = kap + (0.0,) * max(0, kmax - 1 - len(kap))
    return CumulantModel(N, q, kap, kap, f, "custom")


# ------------------------------------------------------------------ samples

def _upper_index_to_pairs(t: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map row-major linear indices of the upper triangle (with diagonal)
    of an n x n matrix to (row, col)."""
    t = t.astype(np.int64)
    b = 2 * n + 1
    i = np.floor((b - np.sqrt(float(b) ** 2 - 8.0 * t)) / 2).astype(np.int64)

    def start(r):
        return r * n - r * (r - 1) // 2

    i = np.where(start(i) > t, i - 1, i)
    i = np.where(start(i + 1) <= t, i + 1, i)
    return i, i + (t - start(i))


def _random_positions(rng: np.random.Generator, n: int, prob: float, loops: bool):
    m = n * (n + 1) // 2 if loops else n * (n - 1) // 2
    count = rng.binomial(m, prob)
    t = np.sort(rng.choice(m, size=count, replace=False))
    if loops:
        return _upper_index_to_pairs(t, n)
    i, j = _upper_index_to_pairs(t, n - 1)
    return i, j + 1


@dataclass(frozen=True, eq=False)
class MatrixSample:
    """A sampled matrix ``S + const J + diag_shift I`` with S stored sparsely.

    ``rows <= cols`` elementwise; the lower triangle is the mirror image.
    ``role`` is ``"H"`` for the centred matrix, ``"A"`` for the shifted one
    and ``"A_hat"`` for the degree-rescaled adjacency matrix.
    """

    model: CumulantModel
    seed: int | None
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    const: float = 0.0
    diag_shift: float = 0.0
    role: str = "H"
    cached_Z: float | None = field(default=None, compare=False)

    @property
    def N(self) -> int:
        return self.model.N

    @property
    def nnz(self) -> int:
        return len(self.vals)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csr_matrix((v, (r, c)), shape=(self.N, self.N))

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.csr @ v
        if self.const:
            out = out + self.const * v.sum(axis=0)
        if self.diag_shift:
            out = out + self.diag_shift * v
        return out

    def operator(self) -> LinearOperator:
        return LinearOperator((self.N, self.N), matvec=self.matvec, matmat=self.matvec, dtype=float)

    def dense(self, cap: int | None = None) -> np.ndarray:
        cap = dense_cap() if cap is None else cap
        if self.N > cap:
            raise SizeError(f"N={self.N} exceeds dense cap {cap}")
        m = np.full((self.N, self.N), self.const)
        m[np.diag_indices(self.N)] += self.diag_shift
        np.add.at(m, (self.rows, self.cols), self.vals)
        off = self.rows != self.cols
        np.add.at(m, (self.cols[off], self.rows[off]), self.vals[off])
        return m

    def shifted(self) -> MatrixSample:
        """The matrix A = H + f e e* (A = adjacency / sqrt(Np(1-p)) for ER with loops)."""
        if self.role != "H":
            raise PreconditionError("shift applies to the centred matrix only")
        m = self.model
        const = self.const + m.f / m.N
        if m.kind == "erdos_renyi" and m.loops:
            const = 0.0
        return MatrixSample(m, self.seed, self.rows, self.cols, self.vals, const, self.diag_shift, "A")

    def to_matrix_market(self, path) -> None:
        """Write the sparse part S (upper triangle) in Matrix Market format."""
        with open(path, "w", newline="\n") as fh:
            fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
            fh.write(f"% const={float(self.const)!r} diag_shift={float(self.diag_shift)!r} role={self.role}\n")
            fh.write(f"{self.N} {self.N} {self.nnz}\n")
            for i, j, v in zip(self.cols, self.rows, self.vals):
                fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def from_adjacency(model: CumulantModel, rows, cols, seed: int | None = None) -> MatrixSample:
    """Centred ER sample built from an explicit edge list (i <= j)."""
    if model.kind != "erdos_renyi":
        raise UnsupportedModelError("adjacency input needs an Erdos-Renyi model")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    s = model.scale
    p = model.p
    vals = np.full(len(lo), 1.0 / s)
    diag = 0.0 if model.loops else p / s
    return MatrixSample(model, seed, lo, hi, vals, -p / s, diag, "H")


def sample(model: CumulantModel, seed: int) -> MatrixSample:
    """Draw the centred matrix H; identical (model, seed) give identical samples."""
    rng = np.random.default_rng(seed)
    n = model.N
    if model.kind == "erdos_renyi":
        i, j = _random_positions(rng, n, model.p, model.loops)
        return from_adjacency(model, i, j, seed)
    if model.kind == "sparse_rademacher":
        i, j = _random_positions(rng, n, model.q ** 2 / n, True)
        signs = rng.integers(0, 2, size=len(i)) * 2 - 1
        return MatrixSample(model, seed, i, j, signs / model.q)
    if any(k != 0.0 for k in model.kappas[1:]):
        raise UnsupportedModelError("custom models can be sampled only in the Gaussian case")
    i, j = np.triu_indices(n)
    vals = rng.standard_normal(len(i)) / math.sqrt(n)
    return MatrixSample(model, seed, i.astype(np.int64), j.astype(np.int64), vals)


# --------------------------------------------------------------- statistics

@dataclass(frozen=True)
class SampleStats:
    Z: float
    D: float = float("nan")
    d: float = float("nan")


def compute_Z(s: MatrixSample) -> float:
    """(1/N) tr H^2 - 1 from the stored nonzeros."""
    if s.role != "H":
        raise PreconditionError("Z is defined for the centred matrix")
    if s.cached_Z is not None:
        return s.cached_Z
    n, c, d = s.N, s.const, s.diag_shift
    on_diag = s.rows == s.cols
    base = c + d * on_diag
    full = s.vals + base
    mult = np.where(on_diag, 1.0, 2.0)
    background = (n * n - n) * c * c + n * (c + d) ** 2
    tr2 = background + float(np.sum(mult * (full * full - base * base)))
    z = tr2 / n - 1.0
    object.__setattr__(s, "cached_Z", z)
    return z


def compute_Sigma(model: CumulantModel) -> tuple[float, float]:
    """Exact sqrt(N^-2 sum_ij E H_ij^4) and the proxy 1/(sqrt(N) q)."""
    n = model.N
    m4 = ((n * n - n) * model.fourth_moment() + n * model.fourth_moment(True)) / n**2
    return math.sqrt(m4), 1.0 / (math.sqrt(n) * model.q)


def average_degree(s: MatrixSample) -> float:
    """D = N^-1 sum_ij adjacency_ij for an ER sample (loops count once)."""
    if s.model.kind != "erdos_renyi":
        raise UnsupportedModelError("average degree is defined for Erdos-Renyi samples")
    loops = int(np.count_nonzero(s.rows == s.cols))
    return (2 * (s.nnz - loops) + loops) / s.N


def sample_stats(s: MatrixSample) -> SampleStats:
    if s.model.kind != "erdos_renyi":
        return SampleStats(compute_Z(s))
    return SampleStats(compute_Z(s), average_degree(s), s.N * s.model.p)


def rescaled_adjacency(s: MatrixSample) -> MatrixSample:
    """Adjacency matrix divided by the square root of its average degree."""
    if s.model.kind != "erdos_renyi":
        raise UnsupportedModelError("rescaling needs an Erdos-Renyi sample")
    D = average_degree(s)
    if D == 0:
        raise DegenerateGraphError("graph has no edges")
    vals = np.full(s.nnz, 1.0 / math.sqrt(D))
    return MatrixSample(s.model, s.seed, s.rows, s.cols, vals, 0.0, 0.0, "A_hat")
