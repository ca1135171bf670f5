"""Symbolic calculus on formal Green-function monomials.

A formal monomial stands for the sum over free indices of a product of
resolvent entries G_ab (a, b are formal labels), a power of the normalized
trace, and a deterministic prefactor ``coeff * prod(kappa_k) * N^-n_pow * q^-q_pow``.
Resolvent entries are symmetric, so each factor is stored as an ordered pair
``(min, max)``.

The module builds the self-consistent polynomial ``P0(z, x) = 1 + z x + Q0(x)``
whose Stieltjes-branch root approximates the expected normalized trace of the
resolvent of a sparse symmetric matrix, by running the cumulant-expansion
recursion exactly over rationals.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ClassError, PreconditionError, SizeError

Pair = tuple[int, int]

DEFAULT_MAX_ORDER = 12


def _pair(a: int, b: int) -> Pair:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class FormalMonomial:
    """One term ``coeff * prod(kappas) * N^-n_pow * q^-q_pow * ulG^ulg * prod(G_f)``.

    ``kappas`` lists the cumulant orders appearing in the weight (the
    variance cumulant equals one and is never listed).  ``nu1`` is the number
    of free summation indices; labels are ``0 .. nu1-1`` by convention but
    labels absent from every factor are allowed and each contributes a
    factor N when summed.
    """

    coeff: Fraction = Fraction(1)
    kappas: tuple[int, ...] = ()
    nu1: int = 0
    n_pow: int = 0
    q_pow: int = 0
    factors: tuple[Pair, ...] = ()
    ulg: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coeff", Fraction(self.coeff))
        object.__setattr__(self, "kappas", tuple(sorted(self.kappas)))
        object.__setattr__(
            self, "factors", tuple(sorted(_pair(a, b) for a, b in self.factors))
        )

    @property
    def sigma(self) -> int:
        return len(self.factors) + self.ulg

    @property
    def nu2(self) -> int:
        return sum(1 for a, b in self.factors if a != b)

    @property
    def labels(self) -> frozenset[int]:
        return frozenset(x for f in self.factors for x in f)

    def theta(self, beta: float) -> float:
        """Exponent of N in the prefactor once q = N^beta."""
        return self.n_pow + beta * self.q_pow

    @property
    def key(self) -> tuple:
        return (self.sigma, self.n_pow, self.q_pow, self.factors, self.ulg, self.kappas, self.nu1)

    def with_coeff(self, coeff) -> FormalMonomial:
        return FormalMonomial(coeff, self.kappas, self.nu1, self.n_pow, self.q_pow, self.factors, self.ulg)

    def __mul__(self, other: FormalMonomial) -> FormalMonomial:
        # Labels of the right operand are shifted so both index sets stay free.
        shift = max(self.nu1, max(self.labels, default=-1) + 1)
        moved = tuple((a + shift, b + shift) for a, b in other.factors)
        return FormalMonomial(
            self.coeff * other.coeff,
            self.kappas + other.kappas,
            self.nu1 + other.nu1,
            self.n_pow + other.n_pow,
            self.q_pow + other.q_pow,
            self.factors + moved,
            self.ulg + other.ulg,
        )

    def weight(self, kappa: Mapping[int, float]) -> float:
        w = float(self.coeff)
        for k in self.kappas:
            w *= kappa[k]
        return w

    def __str__(self) -> str:
        parts = [str(self.coeff)]
        parts += [f"k{k}" for k in self.kappas]
        if self.n_pow:
            parts.append(f"N^-{self.n_pow}")
        if self.q_pow:
            parts.append(f"q^-{self.q_pow}")
        parts += [f"G{a}{b}" for a, b in self.factors]
        if self.ulg:
            parts.append(f"g^{self.ulg}")
        return "*".join(parts)


@dataclass(frozen=True)
class TermSum:
    """A canonically ordered sum of monomials with like terms merged.

    ``discarded_bound`` records the largest N-exponent (as ``-theta`` plus
    a Ward-type gain) among terms dropped while producing this sum, or None
    when nothing was dropped.
    """

    terms: tuple[FormalMonomial, ...] = ()
    discarded_bound: float | None = None

    @classmethod
    def of(cls, terms: Iterable[FormalMonomial], discarded_bound=None) -> TermSum:
        acc: dict[tuple, Fraction] = {}
        proto: dict[tuple, FormalMonomial] = {}
        for t in terms:
            k = t.key
            acc[k] = acc.get(k, Fraction(0)) + t.coeff
            proto.setdefault(k, t)
        merged = [proto[k].with_coeff(c) for k, c in sorted(acc.items()) if c != 0]
        return cls(tuple(merged), discarded_bound)

    def __len__(self) -> int:
        return len(self.terms)

    def __iter__(self) -> Iterator[FormalMonomial]:
        return iter(self.terms)

    def __add__(self, other: TermSum) -> TermSum:
        bounds = [b for b in (self.discarded_bound, other.discarded_bound) if b is not None]
        return TermSum.of(self.terms + other.terms, max(bounds) if bounds else None)

    def scaled(self, c) -> TermSum:
        return TermSum.of((t.with_coeff(t.coeff * c) for t in self.terms), self.discarded_bound)


# ---------------------------------------------------------------- derivatives

def _factor_derivative(f: Pair, k: int, l: int) -> list[tuple[Pair, Pair]]:
    a, b = f
    if k == l:
        return [(_pair(a, k), _pair(k, b))]
    return [(_pair(a, k), _pair(l, b)), (_pair(a, l), _pair(k, b))]


def _dead(factors: Iterable[Pair], k: int, l: int) -> bool:
    """True if some off-diagonal factor can never become diagonal.

    Further derivatives w.r.t. H_kl only create entries with an endpoint in
    {k, l}, so an off-diagonal factor touching a label outside {k, l}
    survives to the end.
    """
    ends = (k, l)
    return any(a != b and (a not in ends or b not in ends) for a, b in factors)


def _derive_once(term: FormalMonomial, k: int, l: int) -> Iterator[FormalMonomial]:
    facs = term.factors
    for pos, f in enumerate(facs):
        rest = facs[:pos] + facs[pos + 1:]
        for new in _factor_derivative(f, k, l):
            yield FormalMonomial(
                -term.coeff, term.kappas, term.nu1, term.n_pow, term.q_pow, rest + new, term.ulg
            )
    if term.ulg:
        # d ulG / dH_kl = -(2 / N) (1 + delta_kl)^-1 sum_w G_wk G_wl, w a fresh index.
        w = max(term.labels | {k, l, term.nu1 - 1}) + 1
        c = Fraction(-term.ulg * (1 if k == l else 2))
        yield FormalMonomial(
            term.coeff * c,
            term.kappas,
            term.nu1 + 1,
            term.n_pow + 1,
            term.q_pow,
            facs + (_pair(w, k), _pair(w, l)),
            term.ulg - 1,
        )


def derivative_terms(term: FormalMonomial, pair: Pair, k: int) -> list[FormalMonomial]:
    """Raw k-fold Leibniz expansion without merging (for counting)."""
    cur = [term]
    for _ in range(k):
        cur = [t for s in cur for t in _derive_once(s, *pair)]
    return cur


def differentiate(
    term: FormalMonomial,
    pair: Pair,
    k: int,
    *,
    max_order: int = DEFAULT_MAX_ORDER,
    diagonal_only: bool = False,
) -> TermSum:
    """k-th derivative of ``term`` with respect to the matrix entry at ``pair``.

    With ``diagonal_only`` the result is the diagonal projection of the
    derivative, and branches that provably stay off-diagonal are pruned
    early.
    """
    if k < 0:
        raise ValueError("derivative order must be nonnegative")
    if k > max_order:
        raise SizeError(f"derivative order {k} exceeds guard {max_order}")
    i, j = pair
    cur = TermSum.of([term])
    for _ in range(k):
        nxt = []
        for s in cur:
            for t in _derive_once(s, i, j):
                if diagonal_only and _dead(t.factors, i, j):
                    continue
                nxt.append(t)
        cur = TermSum.of(nxt)
    if diagonal_only:
        cur = TermSum.of(t for t in cur if t.nu2 == 0)
    return cur


def diagonal_projection(ts: TermSum) -> tuple[TermSum, TermSum]:
    """Split into the part without off-diagonal factors and the remainder.

    Each off-diagonal factor gains a factor sqrt(Gamma) against the diagonal
    class; the dropped part's ``discarded_bound`` is the largest of
    ``-n_pow + nu1 - nu2 / 2`` (in powers of N, taking Gamma ~ 1/N at
    worst-case scale), a crude but monotone size indicator.
    """
    diag = [t for t in ts if t.nu2 == 0]
    off = [t for t in ts if t.nu2 > 0]
    bound = max((t.nu1 - t.n_pow - t.nu2 / 2 for t in off), default=None)
    return TermSum.of(diag, ts.discarded_bound), TermSum.of(off, bound)


# ------------------------------------------------------ averaging reduction

def _fold(t: FormalMonomial) -> FormalMonomial:
    """Canonical form of a diagonal-only monomial.

    A label occurring in exactly one diagonal factor sums to N * ulG; a
    label occurring in none sums to N.  Remaining labels are renamed by
    decreasing multiplicity.
    """
    mult = Counter(a for a, _ in t.factors)
    singles = [x for x, m in mult.items() if m == 1]
    keep = sorted((x for x, m in mult.items() if m >= 2), key=lambda x: (-mult[x], x))
    absent = t.nu1 - len(mult)
    rename = {x: i for i, x in enumerate(keep)}
    factors = tuple((rename[a], rename[a]) for a, _ in t.factors if a in rename)
    return FormalMonomial(
        t.coeff,
        t.kappas,
        len(keep),
        t.n_pow - absent - len(singles),
        t.q_pow,
        factors,
        t.ulg + len(singles),
    )


def _shape(t: FormalMonomial) -> tuple[int, tuple[int, ...]]:
    mult = Counter(a for a, _ in t.factors)
    return t.ulg, tuple(sorted(mult.values(), reverse=True))


def _unit(ulg: int, mults: tuple[int, ...]) -> FormalMonomial:
    factors = tuple((x, x) for x, m in enumerate(mults) for _ in range(m))
    n = len(mults)
    return FormalMonomial(1, (), n, n, 0, factors, ulg)


def _correction_terms(ulg: int, mults: tuple[int, ...], budget: int, kmax: int) -> list[FormalMonomial]:
    """One replacement step on the first index of a canonical unit monomial.

    Uses G_xx = ulG + G_xx (HG)_avg - (HG)_xx ulG, expanding both averages
    by cumulants.  The order-one cumulant terms cancel identically and are
    skipped; corrections of degree beyond ``budget`` are not generated.
    """
    base = _unit(ulg, mults)
    n = base.nu1
    rest = base.factors[1:]  # drop one G_00
    out = [FormalMonomial(1, (), n, n, 0, rest, ulg + 1)]
    x, y = n, n + 1
    # an order-k term raises the Green degree by k + 1
    for k in range(2, min(budget - 1, kmax) + 1):
        w = Fraction(1, math.factorial(k))
        kap = (k + 1,)
        second = FormalMonomial(w, kap, n + 2, n + 2, k - 1, base.factors + ((x, y),), ulg)
        out += differentiate(second, (x, y), k, max_order=kmax, diagonal_only=True).terms
        third = FormalMonomial(-w, kap, n + 1, n + 1, k - 1, rest + ((0, x),), ulg + 1)
        out += differentiate(third, (0, x), k, max_order=kmax, diagonal_only=True).terms
    return [_fold(t) for t in out]


@lru_cache(maxsize=None)
def _reduce(ulg: int, mults: tuple[int, ...], budget: int, kmax: int) -> tuple:
    """Expansion of a canonical unit monomial as sum c * kappas * q^-qp * ulG^(sigma + e).

    Returns a sorted tuple of ((e, qp, kappas), Fraction).  ``budget`` is the
    largest admissible increase of the Green-function degree.
    """
    if not mults:
        return (((0, 0, ()), Fraction(1)),)
    sigma = ulg + sum(mults)
    acc: dict[tuple, Fraction] = defaultdict(Fraction)
    for t in _correction_terms(ulg, mults, budget, kmax):
        if t.nu1 != t.n_pow:
            raise AssertionError("averaging step broke N-power balance")
        extra = t.sigma - sigma
        if extra > budget:
            continue
        g2, m2 = _shape(t)
        for (e, qp, kap), c in _reduce(g2, m2, budget - extra, kmax):
            acc[(extra + e, t.q_pow + qp, tuple(sorted(t.kappas + kap)))] += t.coeff * c
    return tuple(sorted((k, c) for k, c in acc.items() if c != 0))


def collapse(term: FormalMonomial) -> FormalMonomial:
    """Replace every diagonal entry by the normalized trace."""
    if term.nu2:
        raise ClassError("collapse needs a diagonal-only monomial")
    return FormalMonomial(
        term.coeff, term.kappas, 0, term.n_pow - term.nu1, term.q_pow, (), term.sigma
    )


def averaging_reduce(term: FormalMonomial, r: int, *, max_order: int | None = None) -> TermSum:
    """Expected-value reduction of a diagonal-only monomial to powers of ulG.

    The result keeps corrections whose total Green degree is at most
    ``sigma + 2 r``; ``r = 1`` is plain collapse.  Each returned monomial has
    no free indices.
    """
    if term.nu2:
        raise ClassError(f"monomial has {term.nu2} off-diagonal factors")
    if r < 1:
        raise ValueError("r must be at least 1")
    folded = _fold(term)
    if r == 1:
        return TermSum.of([collapse(folded)])
    kmax = max_order if max_order is not None else 2 * r + 1
    g, mults = _shape(folded)
    base_n = folded.n_pow - folded.nu1
    out = []
    for (e, qp, kap), c in _reduce(g, mults, 2 * r, kmax):
        out.append(
            FormalMonomial(
                folded.coeff * c,
                folded.kappas + kap,
                0,
                base_n,
                folded.q_pow + qp,
                (),
                folded.sigma + e,
            )
        )
    return TermSum.of(out)


# ------------------------------------------------------------- polynomial

@dataclass(frozen=True)
class SelfConsistentPolynomial:
    """``P0(z, x) = 1 + z x + sum_l a_l q^(-2(l-1)) x^(2l)``.

    ``terms`` keeps the exact construction: entries
    ``(x_power, q_power, kappa_orders, coefficient)``; ``a`` is its float
    evaluation at the stored ``q`` and cumulants.
    """

    beta: float
    q: float
    degree: int
    a: tuple[float, ...]
    a_bound: tuple[float, ...] = ()
    terms: tuple = field(default=(), repr=False, compare=False)

    @property
    def coeffs_a(self) -> tuple[float, ...]:
        return self.a

    def x_coefficients(self) -> np.ndarray:
        """Coefficients of the x-polynomial without the constant and z terms,
        indexed by power of x."""
        c = np.zeros(max(self.degree, 2) + 1)
        for l, al in enumerate(self.a, start=1):
            c[2 * l] = al * self.q ** (-2 * (l - 1))
        return c

    def coefficients(self, z: complex, Z_shift: float = 0.0) -> np.ndarray:
        """Ascending coefficients of ``P(z, .) = P0(z, .) + Z_shift x^2``."""
        c = self.x_coefficients().astype(complex)
        c[0] += 1.0
        c[1] += z
        c[2] += Z_shift
        return c

    def __call__(self, z, x, Z_shift: float = 0.0):
        x = np.asarray(x, dtype=complex)
        c = self.x_coefficients()
        c[2] += Z_shift
        return 1.0 + z * x + np.polynomial.polynomial.polyval(x, c)

    def to_json(self) -> str:
        doc = {"beta": self.beta, "q": self.q, "degree": self.degree, "a": list(self.a)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SelfConsistentPolynomial:
        doc = json.loads(text)
        return cls(float(doc["beta"]), float(doc["q"]), int(doc["degree"]), tuple(map(float, doc["a"])))

    @classmethod
    def quadratic(cls, beta: float = 0.5, q: float = 1.0) -> SelfConsistentPolynomial:
        """The semicircle polynomial 1 + z x + x^2."""
        return cls(beta, q, 2, (1.0,), (1.0,))

    def table(self) -> str:
        lines = ["l  x_power  a_l  bound"]
        for l, (al, b) in enumerate(zip(self.a, self.a_bound or self.a), start=1):
            lines.append(f"{l}  {2 * l}  {al:.12g}  {b:.6g}")
        return "\n".join(lines) + "\n"


def ceil_inv(beta: float) -> int:
    """ceil(1/beta), robust to round-off when 1/beta is an integer."""
    return math.ceil(1.0 / beta - 1e-9)


def expansion_order(beta: float) -> int:
    return 2 * ceil_inv(beta) + 2


def q0_terms(beta: float) -> dict[tuple[int, int, tuple[int, ...]], Fraction]:
    """Exact Q0 as a map (x_power, q_power, kappa orders) -> coefficient."""
    c = ceil_inv(beta)
    ell = expansion_order(beta)
    acc: dict[tuple, Fraction] = defaultdict(Fraction)
    for k in range(1, ell + 1, 2):
        s = (k + 1) // 2
        r = 1 if s == 1 else c - 2 * s + 2
        if r < 1:
            continue
        kap = () if k == 1 else (k + 1,)
        top = FormalMonomial(Fraction(1, math.factorial(k)), kap, 2, 2, k - 1, ((0, 1),))
        for t in differentiate(top, (0, 1), k, max_order=ell, diagonal_only=True):
            for m in averaging_reduce(t, r, max_order=ell):
                if m.n_pow != 0:
                    raise AssertionError("reduced term is not of order one")
                acc[(m.sigma, m.q_pow, m.kappas)] -= m.coeff
    return {k: v for k, v in sorted(acc.items()) if v != 0}


def _required_cumulants(terms) -> int:
    return max((max(k) for _, _, k in terms if k), default=2)


def build_P0(model, beta: float | None = None, q: float | None = None) -> SelfConsistentPolynomial:
    """Self-consistent polynomial for a cumulant model.

    ``model`` needs attributes ``beta``, ``q`` and ``kappa(k)`` (normalized
    off-diagonal cumulant of order k), plus ``K_max`` and optionally
    ``kappa_bound(k)``.
    """
    beta = model.beta if beta is None else beta
    q = model.q if q is None else q
    need = expansion_order(beta)
    if model.K_max < need:
        raise PreconditionError(f"model provides cumulants up to {model.K_max}, need {need}")
    terms = q0_terms(beta)
    bound_of = getattr(model, "kappa_bound", None)
    degree = 2 * ceil_inv(beta)
    a = [0.0] * (degree // 2)
    bound = [0.0] * (degree // 2)
    for (xp, qp, kap), c in terms.items():
        l = xp // 2
        scale = q ** (2 * (l - 1) - qp)
        a[l - 1] += float(c) * math.prod(model.kappa(k) for k in kap) * scale
        kb = math.prod((bound_of(k) if bound_of else abs(model.kappa(k))) for k in kap)
        bound[l - 1] += abs(float(c)) * kb * scale
    # The x^2 coefficient is exactly one; float round-off cannot enter it.
    a[0] = 1.0
    # Drop trailing zeros (e.g. the Gaussian limit) so degree reflects the polynomial.
    while len(a) > 1 and a[-1] == 0.0:
        a.pop()
        bound.pop()
    table = tuple((xp, qp, kap, c) for (xp, qp, kap), c in terms.items())
    return SelfConsistentPolynomial(float(beta), float(q), 2 * len(a), tuple(a), tuple(bound), table)


# ---------------------------------------------------------------- evaluation

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def evaluate_sum(
    term: FormalMonomial,
    G: np.ndarray,
    q: float = 1.0,
    kappa: Mapping[int, float] | None = None,
    *,
    max_indices: int = 3,
) -> complex:
    """Numerically sum ``term`` over all index tuples using the matrix ``G``.

    ``G`` is the dense resolvent (symmetric, complex).  The cumulant weights
    are taken from ``kappa`` (required when ``term.kappas`` is nonempty).
    """
    if term.nu1 > max_indices:
        raise SizeError(f"{term.nu1} free indices exceed the guard {max_indices}")
    n = G.shape[0]
    diag = np.diagonal(G)
    operands, subs = [], []
    for a, b in term.factors:
        if a == b:
            operands.append(diag)
            subs.append(_LETTERS[a])
        else:
            operands.append(G)
            subs.append(_LETTERS[a] + _LETTERS[b])
    total = complex(np.einsum(",".join(subs) + "->", *operands)) if operands else 1.0 + 0j
    absent = term.nu1 - len(term.labels)
    total *= float(n) ** absent
    if term.ulg:
        total *= (np.trace(G) / n) ** term.ulg
    w = term.weight(kappa or {})
    return total * w * float(n) ** (-term.n_pow) * q ** (-term.q_pow)
