"""Spectral measures defined by a self-consistent polynomial.

The Stieltjes transform m(z) is the root of ``P(z, .)`` that behaves like
``-1/z`` at infinity.  It is tracked from ``z = E + iT`` (T = 100) down to
the requested height along a geometric ladder of imaginary parts, taking
at every step the companion-matrix root closest to a linear prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from .errors import ContinuationError, DomainError, ShapeError
from .formalcalc import SelfConsistentPolynomial

T_START = 100.0
ETA_LADDER = (1e-5, 1e-6, 1e-7)
STEP_RATIO = 0.75
AMBIGUITY = 0.3


# ----------------------------------------------------------------- roots

def _batched_roots(poly: SelfConsistentPolynomial, Z_shift: float, z: np.ndarray) -> np.ndarray:
    """All roots in x of P(z, x) for a vector of z; shape (len(z), degree)."""
    c = poly.x_coefficients().astype(complex)
    c[0] += 1.0
    c[2] += Z_shift
    d = len(c) - 1
    while c[d] == 0:
        d -= 1
    z = np.asarray(z, dtype=complex)
    coeffs = np.broadcast_to(c[:d], (len(z), d)).copy()
    coeffs[:, 1] += z
    comp = np.zeros((len(z), d, d), dtype=complex)
    comp[:, np.arange(1, d), np.arange(d - 1)] = 1.0
    comp[:, :, -1] = -coeffs / c[d]
    return np.linalg.eigvals(comp)


def _pick(roots: np.ndarray, guess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest root to ``guess`` per row and the ratio nearest/second-nearest."""
    dist = np.abs(roots - guess[:, None])
    order = np.argsort(dist, axis=1)
    rows = np.arange(len(guess))
    best = roots[rows, order[:, 0]]
    if roots.shape[1] < 2:
        return best, np.zeros(len(guess))
    ratio = dist[rows, order[:, 0]] / np.maximum(dist[rows, order[:, 1]], 1e-300)
    return best, ratio


def _eta_path(etas, ratio: float = STEP_RATIO) -> np.ndarray:
    """Descending geometric schedule from T_START through every target in ``etas``."""
    points = [T_START]
    for target in sorted(etas, reverse=True):
        top = points[-1]
        if target >= top:
            continue
        n = max(1, math.ceil(math.log(target / top) / math.log(ratio)))
        seg = top * (target / top) ** (np.arange(1, n + 1) / n)
        seg[-1] = target
        points.extend(seg)
    return np.array(points)


def _track_single(poly, Z_shift: float, E: float, etas: list[float]) -> list[complex]:
    """Adaptive continuation for one real part; returns m at each eta in ``etas``."""
    z0 = complex(E, max(T_START, etas[0]))
    roots = _batched_roots(poly, Z_shift, np.array([z0]))
    m, _ = _pick(roots, np.array([-1.0 / z0]))
    prev = (math.log(z0.imag), complex(m[0]))
    slope = 0.0j
    out = []
    log_eta = prev[0]
    for target in sorted(etas, reverse=True):
        goal = math.log(target)
        step = -math.log(1 / STEP_RATIO)
        while log_eta > goal + 1e-15:
            h = max(step, goal - log_eta)
            cand = log_eta + h
            guess = prev[1] + slope * h
            roots = _batched_roots(poly, Z_shift, np.array([complex(E, math.exp(cand))]))
            m, ratio = _pick(roots, np.array([guess]))
            if ratio[0] > AMBIGUITY:
                step = h / 2
                if abs(step) < 1e-10:
                    raise ContinuationError(f"branch lost at E={E}", last_good=prev)
                continue
            slope = (complex(m[0]) - prev[1]) / h
            prev = (cand, complex(m[0]))
            log_eta = cand
            step = max(step * 1.5, -math.log(1 / STEP_RATIO) * 2)
        out.append(prev[1])
    return out


def solve_m(poly: SelfConsistentPolynomial, Z_shift: float, z: complex) -> complex:
    """Stieltjes-branch root of P(z, x) = P0(z, x) + Z_shift x^2."""
    z = complex(z)
    if z.imag <= 0:
        raise DomainError("Im z must be positive")
    return _track_single(poly, Z_shift, z.real, [z.imag])[0]


def solve_m_batch(poly, Z_shift: float, E: np.ndarray, etas=ETA_LADDER) -> np.ndarray:
    """m(E + i eta) for a vector of E and each eta in ``etas``; shape (len(etas), len(E)).

    Uses one common eta schedule for the whole batch; points where root
    selection is ambiguous are redone by the adaptive single-point tracker.
    """
    E = np.asarray(E, dtype=float)
    etas = sorted(etas, reverse=True)
    path = _eta_path(etas)
    m = -1.0 / (E + 1j * path[0])
    m, _ = _pick(_batched_roots(poly, Z_shift, E + 1j * path[0]), m)
    prev_m, prev_t = m.copy(), math.log(path[0])
    slope = np.zeros_like(m)
    bad = np.zeros(len(E), dtype=bool)
    out = np.empty((len(etas), len(E)), dtype=complex)
    want = {eta: k for k, eta in enumerate(etas)}
    for eta in path[1:]:
        t = math.log(eta)
        guess = prev_m + slope * (t - prev_t)
        m, ratio = _pick(_batched_roots(poly, Z_shift, E + 1j * eta), guess)
        bad |= ratio > AMBIGUITY
        slope = (m - prev_m) / (t - prev_t)
        prev_m, prev_t = m, t
        if eta in want:
            out[want[eta]] = m
    for j in np.flatnonzero(bad):
        out[:, j] = _track_single(poly, Z_shift, float(E[j]), etas)
    return out


def richardson_zero(etas, values) -> np.ndarray:
    """Value at eta = 0 of the quadratic through (eta_k, values_k)."""
    etas = np.asarray(etas, dtype=float)
    vals = np.asarray(values)
    total = np.zeros(vals.shape[1:], dtype=vals.dtype)
    for k, ek in enumerate(etas):
        w = np.prod([ej / (ej - ek) for j, ej in enumerate(etas) if j != k])
        total = total + w * vals[k]
    return total


def density_values(poly, Z_shift: float, E) -> np.ndarray:
    E = np.atleast_1d(np.asarray(E, dtype=float))
    m = solve_m_batch(poly, Z_shift, E, ETA_LADDER)
    rho = richardson_zero(sorted(ETA_LADDER, reverse=True), m.imag) / math.pi
    return np.clip(rho, 0.0, None)


def evaluate_P(poly: SelfConsistentPolynomial, Z_shift: float, z, ulG):
    """P(z, ulG) = P0(z, ulG) + Z_shift ulG^2."""
    return poly(z, ulG, Z_shift)


# ------------------------------------------------------------------ edge

def find_edge(poly: SelfConsistentPolynomial, Z_shift: float = 0.0) -> float:
    """Right edge L of the support.

    At the edge the branch root is a real double root of P(L, .): writing
    P = 1 + z x + R(x), the root x* solves 1 + R(x) - x R'(x) = 0 and
    L = -R'(x*).  The root nearest to the semicircle value -1/sqrt(1+Z) is
    polished by Newton's method and the result is checked against
    the bracket [1, 4].
    """
    r = poly.x_coefficients().astype(float)
    r[2] += Z_shift
    R = np.polynomial.Polynomial(r)
    dR = R.deriv()
    h = 1 + R - np.polynomial.Polynomial([0, 1]) * dR
    dh = h.deriv()
    cand = h.roots()
    real = cand[np.abs(cand.imag) < 1e-8].real
    real = real[real < 0]
    if len(real) == 0:
        raise ShapeError("no real double root of P on the negative axis")
    x = real[np.argmin(np.abs(real + 1.0 / math.sqrt(max(1.0 + Z_shift, 1e-12))))]
    for _ in range(50):
        dx = h(x) / dh(x)
        x -= dx
        if abs(dx) < 1e-16:
            break
    L = -dR(x)
    if not 1.0 <= L <= 4.0:
        raise ShapeError(f"edge {L} outside [1, 4]")
    return float(L)


# ------------------------------------------------------------- semicircle

def semicircle_cdf(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 2.0):
        raise DomainError("semicircle cdf needs |x| <= 2")
    return 0.5 + x * np.sqrt(4.0 - x * x) / (4 * math.pi) + np.arcsin(x / 2.0) / math.pi


def semicircle_quantile(u, tol: float = 1e-13):
    """Inverse of ``semicircle_cdf`` by vectorized bisection."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u > 1)):
        raise DomainError("quantile level must lie in [0, 1]")
    lo = np.full(u.shape, -2.0)
    hi = np.full(u.shape, 2.0)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = semicircle_cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


def semicircle_density(x):
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.clip(4.0 - x * x, 0.0, None)) / (2 * math.pi)


# ---------------------------------------------------------------- measures

@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """Density on a Chebyshev grid ``E = L cos(theta)`` and its distribution function.

    The cdf is integrated in theta, where the density times the Jacobian is
    smooth across the square-root edges, and interpolated monotonically.
    """

    poly: SelfConsistentPolynomial
    Z_shift: float
    edge_L: float
    theta: np.ndarray
    E: np.ndarray
    rho: np.ndarray
    F: np.ndarray
    mass: float
    _interp: PchipInterpolator = field(repr=False)

    @property
    def density_grid(self) -> np.ndarray:
        return np.column_stack([self.E, self.rho])


    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), -self.edge_L, self.edge_L)
        th = np.arccos(x / self.edge_L)
        return np.clip(self._interp(th), 0.0, 1.0)

    def quantile(self, u, tol: float = 1e-14):
        """Inverse cdf by bisection in theta; u = 1 maps to the edge L."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        lo = np.zeros(u.shape)  # theta = 0 is E = L, cdf = 1
        hi = np.full(u.shape, math.pi)
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            above = self._interp(mid) > u
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return self.edge_L * np.cos(0.5 * (lo + hi))

    def to_csv(self) -> str:
        lines = ["E,density"] + [f"{float(e)!r},{float(r)!r}" for e, r in zip(self.E[::-1], self.rho[::-1])]
        return "\n".join(lines) + "\n"


def build_measure(poly: SelfConsistentPolynomial, Z_shift: float = 0.0, n_grid: int = 4001) -> SpectralMeasure:
    if abs(Z_shift) > 0.5:
        raise ContinuationError(f"|Z|={abs(Z_shift)} beyond the supported range 0.5")
    L = find_edge(poly, Z_shift)
    theta = np.linspace(0.0, math.pi, n_grid)
    E = L * np.cos(theta)
    rho = np.zeros(n_grid)
    # the measure is symmetric: evaluate E >= 0 and mirror
    idx = np.arange(1, (n_grid - 1) // 2 + 1)
    rho[idx] = density_values(poly, Z_shift, E[idx])
    rho[n_grid - 1 - idx] = rho[idx]
    # mass above E, integrated in theta
    tail = cumulative_simpson(rho * L * np.sin(theta), x=theta, initial=0.0)
    # normalise so the cdf runs exactly from 0 to 1; the raw total is kept as mass
    F = 1.0 - tail / tail[-1]
    interp = PchipInterpolator(theta, F)
    return SpectralMeasure(poly, float(Z_shift), L, theta, E, rho, F, float(tail[-1]), interp)


def density(measure: SpectralMeasure, E: float) -> float:
    """(1/pi) lim Im m(E + i eta) via the eta ladder and Richardson extrapolation."""
    if abs(E) > measure.edge_L + 0.1:
        raise DomainError(f"|E|={abs(E)} beyond L + 0.1")
    return float(density_values(measure.poly, measure.Z_shift, [E])[0])


# --------------------------------------------------------------- quantiles

@dataclass(frozen=True)
class QuantileTable:
    N: int
    gamma: np.ndarray
    gamma0: np.ndarray
    gamma_sc: np.ndarray

    def to_csv(self) -> str:
        rows = ["i,gamma,gamma0,gamma_sc"]
        rows += [
            f"{i + 1},{float(a)!r},{float(b)!r},{float(c)!r}"
            for i, (a, b, c) in enumerate(zip(self.gamma, self.gamma0, self.gamma_sc))
        ]
        return "\n".join(rows) + "\n"


def semicircle_quantiles(N: int) -> np.ndarray:
    out = np.asarray(semicircle_quantile(np.arange(1, N + 1) / N), dtype=float)
    out[-1] = 2.0
    return out


def measure_quantiles(measure: SpectralMeasure, N: int) -> np.ndarray:
    g = measure.quantile(np.arange(1, N + 1) / N)
    g[-1] = measure.edge_L
    return g


def quantiles(measure: SpectralMeasure, N: int, base: SpectralMeasure | None = None) -> QuantileTable:
    """Quantile table; ``base`` is the unshifted measure (built if needed)."""
    gamma = measure_quantiles(measure, N)
    if measure.Z_shift == 0.0:
        gamma0 = gamma
    else:
        base = base or build_measure(measure.poly, 0.0, len(measure.theta))
        gamma0 = measure_quantiles(base, N)
    return QuantileTable(N, gamma, gamma0, semicircle_quantiles(N))


def gamma_relation_check(measure0: SpectralMeasure, Z: float, N: int) -> float:
    """max |gamma_i - gamma0_i - gamma_sc_i Z / 2| over i with |i/N - 1/2| >= 0.05."""
    if abs(Z) > 0.5:
        raise DomainError("|Z| must be at most 0.5")
    shifted = build_measure(measure0.poly, Z, len(measure0.theta)) if Z else measure0
    table = quantiles(shifted, N, base=measure0)
    i = np.arange(1, N + 1)
    keep = np.abs(i / N - 0.5) >= 0.05
    dev = table.gamma - table.gamma0 - table.gamma_sc * Z / 2
    return float(np.max(np.abs(dev[keep])))

