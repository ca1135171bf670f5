"""Monte Carlo experiments on eigenvalue fluctuations and rigidity.

Every experiment maps a frozen configuration to per-sample records and an
aggregate summary.  Sample ``i`` at dimension ``N`` is drawn from the seed
``derive_seed(derive_seed(master_seed, N), i)``, and records are
aggregated in index order, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Any, Callable

import numpy as np
from scipy import stats as sps
from scipy.special import ndtr
from threadpoolctl import threadpool_limits

from . import ensemble, spectra
from .ensemble import CumulantModel, compute_Sigma, compute_Z, derive_seed
from .errors import ConfigError, DegenerateGraphError, DomainError, PreconditionError
from .formalcalc import SelfConsistentPolynomial, build_P0
from .scmeasure import build_measure, find_edge, semicircle_quantile

EXPERIMENTS = ("z-clt", "edge", "bulk", "rescale", "joint", "rigidity", "p-small")
CENTRE_WINDOW = 0.05
# standard deviation of the limiting Kolmogorov distribution
KOLMOGOROV_SD = 0.2603


def delta_exponent(beta: float) -> float:
    """Exponent 0.1 * min(beta, 1/6 - beta) used in the fluctuation error terms."""
    return 0.1 * min(beta, 1.0 / 6.0 - beta)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ModelSpec:
    """Ensemble descriptor; exactly one of ``p``, ``beta``, ``q`` fixes the sparsity."""

    kind: str
    N: int
    p: float | None = None
    beta: float | None = None
    q: float | None = None
    loops: bool = True
    kappas: tuple[float, ...] = ()

    def __post_init__(self):
        given = [x is not None for x in (self.p, self.beta, self.q)]
        if self.kind == "custom":
            if sum(given) > 1:
                raise ConfigError("custom model takes at most one of p, beta, q")
        elif sum(given) != 1:
            raise ConfigError("model needs exactly one of p, beta, q")
        if self.kind not in ensemble.KINDS:
            raise ConfigError(f"model.kind: unknown kind {self.kind!r}")
        if self.N < 2:
            raise ConfigError("model.N must be at least 2")

    def q_value(self, N: int | None = None) -> float:
        N = self.N if N is None else N
        if self.q is not None:
            return self.q
        if self.beta is not None:
            return N ** self.beta
        if self.p is not None:
            return math.sqrt(N * self.p)
        return math.sqrt(N)

    def build(self, N: int | None = None) -> CumulantModel:
        N = self.N if N is None else N
        if self.kind == "erdos_renyi":
            p = self.p if self.p is not None else self.q_value(N) ** 2 / N
            return ensemble.make_er_model(N, p, loops=self.loops)
        if self.kind == "sparse_rademacher":
            return ensemble.make_rademacher_model(N, self.q_value(N))
        kap = self.kappas or (1.0,)
        q = None if (self.q is None and self.beta is None) else self.q_value(N)
        return ensemble.make_custom_model(N, kap, q)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: ModelSpec
    M: int
    master_seed: int
    indices: tuple[int, ...] = ()
    centre_indices: tuple[int, ...] = ()
    z_probes: tuple[complex, ...] = ()
    intervals: tuple[tuple[float, float], ...] = ()
    N_ladder: tuple[int, ...] = ()
    part: str = ""
    gates: tuple[tuple[str, float], ...] = ()
    workers: int = 1
    eps0: float = 0.05
    prefactor: float = 10.0
    domain_c: float = 0.05
    lanczos_restarts: int = 60
    measure_grid: int = 1001
    gate_scale: float = 1.0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: unknown name {self.experiment!r}")
        if self.M < 1:
            raise ConfigError("M must be positive")
        for n in self.Ns:
            for i in self.indices + self.centre_indices:
                if not 1 <= i <= n:
                    raise ConfigError(f"index {i} outside [1, {n}]")

    @property
    def Ns(self) -> tuple[int, ...]:
        return self.N_ladder or (self.model.N,)

    def gate(self, name: str, default: float) -> float:
        return dict(self.gates).get(name, default) * self.gate_scale

    def scaled_gates(self, factor: float) -> ExperimentConfig:
        """Copy with every threshold, explicit or default, multiplied by ``factor``."""
        return replace(self, gate_scale=self.gate_scale * factor)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config from parsed TOML; N, p/beta/q, M and master_seed are mandatory."""
    try:
        name = d["experiment"]
        m = d["model"]
        for key in ("kind", "N"):
            if key not in m:
                raise ConfigError(f"model.{key} is required")
        model = ModelSpec(
            kind=m["kind"],
            N=int(m["N"]),
            p=m.get("p"),
            beta=m.get("beta"),
            q=m.get("q"),
            loops=bool(m.get("loops", True)),
            kappas=tuple(float(k) for k in m.get("kappas", ())),
        )
        for key in ("M", "master_seed"):
            if key not in d:
                raise ConfigError(f"{key} is required")
        return ExperimentConfig(
            experiment=name,
            model=model,
            M=int(d["M"]),
            master_seed=int(d["master_seed"]),
            indices=tuple(int(i) for i in d.get("indices", ())),
            centre_indices=tuple(int(i) for i in d.get("centre_indices", ())),
            z_probes=tuple(complex(re, im) for re, im in d.get("z_probes", ())),
            intervals=tuple((float(a), float(b)) for a, b in d.get("intervals", ())),
            N_ladder=tuple(int(n) for n in d.get("N_ladder", ())),
            part=str(d.get("part", "")),
            gates=tuple(sorted((str(k), float(v)) for k, v in d.get("gates", {}).items())),
            workers=int(d.get("workers", 1)),
            eps0=float(d.get("eps0", 0.05)),
            prefactor=float(d.get("prefactor", 10.0)),
            domain_c=float(d.get("domain_c", 0.05)),
            lanczos_restarts=int(d.get("lanczos_restarts", 60)),
            measure_grid=int(d.get("measure_grid", 1001)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing field {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    model = {k: v for k, v in asdict(cfg.model).items() if v is not None and v != ()}
    out: dict[str, Any] = {
        "experiment": cfg.experiment,
        "M": cfg.M,
        "master_seed": cfg.master_seed,
        "workers": cfg.workers,
        "eps0": cfg.eps0,
        "prefactor": cfg.prefactor,
        "domain_c": cfg.domain_c,
        "lanczos_restarts": cfg.lanczos_restarts,
        "measure_grid": cfg.measure_grid,
    }
    if cfg.indices:
        out["indices"] = list(cfg.indices)
    if cfg.centre_indices:
        out["centre_indices"] = list(cfg.centre_indices)
    if cfg.z_probes:
        out["z_probes"] = [[z.real, z.imag] for z in cfg.z_probes]
    if cfg.intervals:
        out["intervals"] = [list(iv) for iv in cfg.intervals]
    if cfg.N_ladder:
        out["N_ladder"] = list(cfg.N_ladder)
    if cfg.part:
        out["part"] = cfg.part
    out["model"] = model
    out["gates"] = dict(cfg.gates)
    return out


# -------------------------------------------------------------- statistics

def _norm_cdf(x):
    return ndtr(np.asarray(x, dtype=float))


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """P(K > lam) for the Kolmogorov distribution.

    Uses the alternating series for lam >= 1 and the equivalent theta-function
    form below, where the alternating series converges slowly.
    """
    if lam <= 0:
        return 1.0
    k = np.arange(1, terms + 1)
    if lam >= 1.0:
        s = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * lam * lam))
    else:
        s = 1.0 - math.sqrt(2 * math.pi) / lam * np.sum(
            np.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam))
        )
    return float(min(1.0, max(0.0, s)))


def ks_test(samples, cdf: Callable = _norm_cdf) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and asymptotic p-value (default: standard normal)."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n == 0:
        raise DomainError("KS test needs at least one sample")
    F = cdf(x)
    i = np.arange(1, n + 1)
    D = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    return D, kolmogorov_sf(math.sqrt(n) * D)


def _std(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _var(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.var(x, ddof=1)) if len(x) > 1 else 0.0


def _corr(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if _std(x) == 0 or _std(y) == 0:
        return float("nan")
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


def _slope(x, y) -> tuple[float, float]:
    """OLS slope of y on x and its standard error."""
    res = sps.linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return float(res.slope), float(res.stderr)


@dataclass(frozen=True)
class Gate:
    value: float
    op: str
    threshold: float

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.value):
            return False
        return self.value <= self.threshold if self.op == "<=" else self.value >= self.threshold


@dataclass
class EnsembleStats:
    experiment: str
    values: dict[str, Any]
    gates: dict[str, Gate]
    records: list[dict[str, Any]] = field(repr=False)
    plotdata: list[dict[str, Any]] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates.values())

    @property
    def failing(self) -> list[str]:
        return sorted(k for k, g in self.gates.items() if not g.passed)

    def to_json(self, digest: str | None = None) -> str:
        doc = {
            "experiment": self.experiment,
            "values": _jsonable(self.values),
            "gates": {
                k: {"value": _jsonable(g.value), "op": g.op, "threshold": g.threshold, "pass": g.passed}
                for k, g in self.gates.items()
            },
            "all_pass": self.passed,
        }
        if digest is not None:
            doc["digest"] = digest
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def records_csv(records: list[dict], header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    if records:
        w = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ----------------------------------------------------------------- kernels

@lru_cache(maxsize=8)
def _model(spec: ModelSpec, N: int) -> CumulantModel:
    return spec.build(N)


@lru_cache(maxsize=8)
def _poly(spec: ModelSpec, N: int) -> SelfConsistentPolynomial:
    return build_P0(_model(spec, N))


def _seed(cfg: ExperimentConfig, N: int, index: int) -> int:
    return derive_seed(derive_seed(cfg.master_seed, N), index)


def _top(mat, k: int, cfg: ExperimentConfig, side: str = "top") -> np.ndarray:
    spec = spectra.extreme_eigs(mat, k, side, max_restarts=cfg.lanczos_restarts)
    return spec.eigenvalues


def _kernel(job: tuple[ExperimentConfig, int, int]) -> dict[str, Any]:
    cfg, N, index = job
    with threadpool_limits(1):
        return _KERNELS[cfg.experiment](cfg, N, index)


def _base_record(cfg, N, index):
    model = _model(cfg.model, N)
    seed = _seed(cfg, N, index)
    s = ensemble.sample(model, seed)
    return model, s, {"N": N, "index": index, "seed": seed, "Z": compute_Z(s)}


def _k_zclt(cfg, N, index):
    model, _, rec = _base_record(cfg, N, index)
    sigma, _ = compute_Sigma(model)
    rec["X"] = rec["Z"] / (math.sqrt(2.0) * sigma)
    return rec


def _k_edge(cfg, N, index):
    model, s, rec = _base_record(cfg, N, index)
    lam = _top(s.shifted(), 2, cfg)
    rec["lambda_N"], rec["lambda_N1"] = float(lam[1]), float(lam[0])
    if model.f == 0.0:
        rec["lambda_1"] = float(_top(s, 1, cfg, "bottom")[0])
    return rec


def _k_rescale(cfg, N, index):
    _, s, rec = _base_record(cfg, N, index)
    lam = _top(s.shifted(), 2, cfg)
    rec["lambda_N1"] = float(lam[0])
    try:
        hat = ensemble.rescaled_adjacency(s)
        rec["lambda_N1_hat"] = float(_top(hat, 2, cfg)[0])
    except DegenerateGraphError:
        rec["lambda_N1_hat"] = float("nan")
    return rec


def _k_bulk(cfg, N, index):
    _, s, rec = _base_record(cfg, N, index)
    lam = spectra.full_spectrum(s.shifted()).eigenvalues
    for i in sorted(set(cfg.indices + cfg.centre_indices)):
        rec[f"lambda_{i}"] = float(lam[i - 1])
    return rec


def _k_rigidity(cfg, N, index):
    model, s, rec = _base_record(cfg, N, index)
    if cfg.part == "edge":
        rec["mu_N"] = float(_top(s, 1, cfg)[0])
        return rec
    lam = spectra.full_spectrum(s).eigenvalues
    measure = build_measure(_poly(cfg.model, N), rec["Z"], cfg.measure_grid)
    for k, (a, b) in enumerate(cfg.intervals):
        count = int(np.count_nonzero((lam >= a) & (lam <= b)))
        rec[f"count_{k}"] = count
        rec[f"rho_{k}"] = float(measure.cdf(b) - measure.cdf(a))
    return rec


def _k_psmall(cfg, N, index):
    _, s, rec = _base_record(cfg, N, index)
    spec = spectra.full_spectrum(s)
    poly = _poly(cfg.model, N)
    for k, z in enumerate(cfg.z_probes):
        g = spectra.stieltjes(spec, z)
        p = complex(poly(z, g.ulG))
        rec[f"G_re_{k}"], rec[f"G_im_{k}"] = g.ulG.real, g.ulG.imag
        rec[f"Gamma_{k}"] = g.Gamma
        rec[f"P_re_{k}"], rec[f"P_im_{k}"] = p.real, p.imag
    return rec


_KERNELS = {
    "z-clt": _k_zclt,
    "edge": _k_edge,
    "rescale": _k_rescale,
    "bulk": _k_bulk,
    "joint": _k_bulk,
    "rigidity": _k_rigidity,
    "p-small": _k_psmall,
}


def collect_records(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Per-sample records in (N, index) order, computed with the given parallelism."""
    jobs = [(cfg, N, i) for N in cfg.Ns for i in range(cfg.M)]
    workers = cfg.workers if workers is None else workers
    if workers <= 1:
        return [_kernel(j) for j in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_kernel, jobs, chunksize=chunk))


# ------------------------------------------------------------- aggregators

def _col(records, key, N=None):
    return np.array([r[key] for r in records if N is None or r["N"] == N], dtype=float)


def _hist_rows(name: str, x, bins: int = 30) -> list[dict]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return []
    counts, edges = np.histogram(x, bins=bins)
    rows = [
        {"series": name, "kind": "hist", "x": float(0.5 * (lo + hi)), "y": float(c)}
        for lo, hi, c in zip(edges[:-1], edges[1:], counts)
    ]
    if _std(x) > 0:
        std = np.sort((x - x.mean()) / _std(x))
        theo = sps.norm.ppf((np.arange(1, len(x) + 1) - 0.5) / len(x))
        rows += [{"series": name, "kind": "qq", "x": float(t), "y": float(s)} for t, s in zip(theo, std)]
    return rows


def _require_distributional(cfg):
    if cfg.M < 30:
        raise PreconditionError(f"distributional tests need M >= 30 (got {cfg.M})")


def _agg_zclt(cfg, records):
    if cfg.M < 1000:
        raise PreconditionError(f"the CLT check needs M >= 1000 samples per N (got {cfg.M})")
    values, plot = {}, []
    for N in cfg.Ns:
        x = _col(records, "X", N)
        sigma, proxy = compute_Sigma(_model(cfg.model, N))
        if sigma == 0:
            raise PreconditionError("Sigma vanishes for this model")
        D, p = ks_test(x)
        values[str(N)] = {
            "Sigma": sigma,
            "Sigma_proxy": proxy,
            "mean_X": float(np.mean(x)),
            "std_X": _std(x),
            "ks_D": D,
            "ks_p": p,
            "ks_D_se": KOLMOGOROV_SD / math.sqrt(len(x)),
            "Z_abs_q99": float(np.quantile(np.abs(_col(records, "Z", N)), 0.99)),
        }
        plot += _hist_rows(f"X_N{N}", x)
    main = values[str(cfg.Ns[-1])]
    gates = {
        "std_min": Gate(main["std_X"], ">=", cfg.gate("std_min", 0.93)),
        "std_max": Gate(main["std_X"], "<=", cfg.gate("std_max", 1.07)),
        "ks_p_min": Gate(main["ks_p"], ">=", cfg.gate("ks_p_min", 0.01)),
    }
    # along a ladder the KS distance may not grow by more than two standard errors
    for a, b in zip(cfg.Ns, cfg.Ns[1:]):
        va, vb = values[str(a)], values[str(b)]
        excess = vb["ks_D"] - va["ks_D"] - 2 * math.hypot(va["ks_D_se"], vb["ks_D_se"])
        gates[f"ks_monotone_{a}_{b}"] = Gate(excess, "<=", 0.0)
    return values, gates, plot


def _regime_flag(cfg, values):
    beta = _model(cfg.model, cfg.model.N).beta
    values["beta"] = beta
    values["regime_warning"] = beta >= 1.0 / 6.0
    if values["regime_warning"]:
        warnings.warn(f"beta={beta:.3f} is outside the range (0, 1/6) of the sparse fluctuation regime")


def _agg_edge(cfg, records):
    _require_distributional(cfg)
    N = cfg.model.N
    model = _model(cfg.model, N)
    sigma, _ = compute_Sigma(model)
    gsc = float(semicircle_quantile((N - 1) / N))
    lam = _col(records, "lambda_N1")
    Z = _col(records, "Z")
    pred = gsc / 2 * Z
    stdz = (lam - lam.mean()) / _std(lam) if _std(lam) > 0 else lam * 0
    D, p = ks_test(stdz)
    values = {
        "Sigma": sigma,
        "gamma_sc": gsc,
        "corr": _corr(lam, pred),
        "std_lambda": _std(lam),
        "std_ratio": _std(lam) / (sigma * gsc / math.sqrt(2.0)),
        "mean_lambda": float(lam.mean()),
        "ks_D": D,
        "ks_p": p,
    }
    _regime_flag(cfg, values)
    if "lambda_1" in records[0]:
        top = _col(records, "lambda_N")
        bottom = -_col(records, "lambda_1")
        two = sps.ks_2samp(top, bottom)
        values["symmetry_ks_D"] = float(two.statistic)
        values["symmetry_ks_p"] = float(two.pvalue)
    gates = {
        "corr_min": Gate(values["corr"], ">=", cfg.gate("corr_min", 0.7)),
        "std_ratio_min": Gate(values["std_ratio"], ">=", cfg.gate("std_ratio_min", 0.8)),
        "std_ratio_max": Gate(values["std_ratio"], "<=", cfg.gate("std_ratio_max", 1.5)),
    }
    plot = _hist_rows("lambda_N1", lam) + [
        {"series": "scatter", "kind": "xy", "x": float(a), "y": float(b)} for a, b in zip(pred, lam)
    ]
    return values, gates, plot


def _agg_rescale(cfg, records):
    a = _col(records, "lambda_N1")
    h = _col(records, "lambda_N1_hat")
    ok = np.isfinite(h)
    va, vh = _var(a[ok]), _var(h[ok])
    ratio = 1.0 if va == 0 and vh == 0 else (vh / va if va > 0 else float("inf"))
    values = {
        "var_A": va,
        "var_A_hat": vh,
        "var_ratio": ratio,
        "degenerate_skipped": int(np.count_nonzero(~ok)),
        "corr_A_Z": _corr(a[ok], _col(records, "Z")[ok]),
        "corr_A_hat_Z": _corr(h[ok], _col(records, "Z")[ok]),
    }
    gates = {"var_ratio_max": Gate(ratio, "<=", cfg.gate("var_ratio_max", 0.5))}
    return values, gates, _hist_rows("lambda_N1", a) + _hist_rows("lambda_N1_hat", h)


def _check_window(cfg, indices):
    N = cfg.model.N
    for i in indices:
        if abs(i / N - 0.5) < CENTRE_WINDOW:
            raise ConfigError(f"index {i} lies in the excluded centre window")


def _agg_bulk(cfg, records):
    _check_window(cfg, cfg.indices)
    N = cfg.model.N
    model = _model(cfg.model, N)
    sigma, _ = compute_Sigma(model)
    delta = delta_exponent(model.beta)
    Z = _col(records, "Z")
    values: dict[str, Any] = {"Sigma": sigma, "delta": delta}
    gates, plot = {}, []
    for i in cfg.indices:
        lam = _col(records, f"lambda_{i}")
        g = float(semicircle_quantile(i / N))
        pred = g / 2 * Z
        resid = np.abs(lam - lam.mean() - pred)
        scale = N ** (-delta / 2) * sigma
        values[str(i)] = {
            "gamma_sc": g,
            "corr": _corr(lam, pred),
            "mean": float(lam.mean()),
            "std": _std(lam),
            "resid_q99_rel": float(np.quantile(resid, 0.99) / scale),
        }
        gates[f"corr_min_{i}"] = Gate(values[str(i)]["corr"], ">=", cfg.gate("corr_min", 0.85))
        plot += _hist_rows(f"lambda_{i}", lam)
    for i in cfg.centre_indices:
        lam = _col(records, f"lambda_{i}")
        slope, se = _slope(Z, lam)
        values[f"centre_{i}"] = {"slope": slope, "slope_se": se, "t": abs(slope) / se if se > 0 else 0.0}
        gates[f"centre_slope_{i}"] = Gate(values[f"centre_{i}"]["t"], "<=", cfg.gate("slope_t_max", 3.0))
    return values, gates, plot


def standardized(records, i: int, N: int, sigma: float) -> np.ndarray:
    """X_i = (lambda_i - mean) / (gamma_sc_i Sigma / sqrt 2)."""
    lam = _col(records, f"lambda_{i}")
    g = float(semicircle_quantile(i / N))
    return (lam - lam.mean()) / (g * sigma / math.sqrt(2.0))


def _agg_joint(cfg, records):
    if not cfg.indices:
        raise ConfigError("joint experiment needs at least one index")
    _check_window(cfg, cfg.indices)
    N = cfg.model.N
    sigma, _ = compute_Sigma(_model(cfg.model, N))
    X = np.array([standardized(records, i, N, sigma) for i in cfg.indices])
    for i, row in zip(cfg.indices, X):
        for r, x in zip(records, row):
            r[f"X_{i}"] = float(x)
    C = np.atleast_2d(np.corrcoef(X)) if len(cfg.indices) > 1 else np.ones((1, 1))
    C = np.clip(C, -1.0, 1.0)
    off = C[~np.eye(len(C), dtype=bool)]
    values = {
        "Sigma": sigma,
        "gamma_sc": [float(semicircle_quantile(i / N)) for i in cfg.indices],
        "indices": list(cfg.indices),
        "corr_matrix": C.tolist(),
        "max_dev_from_ones": float(np.max(np.abs(C - 1.0))),
        "min_corr": float(off.min()) if off.size else 1.0,
        "X_std": [_std(x) for x in X],
    }
    gates = {"min_corr": Gate(values["min_corr"], ">=", cfg.gate("corr_min", 0.85))}
    return values, gates, sum((_hist_rows(f"X_{i}", x) for i, x in zip(cfg.indices, X)), [])


def _agg_rigidity(cfg, records):
    N = cfg.model.N
    model = _model(cfg.model, N)
    q, beta = model.q, model.beta
    delta = delta_exponent(beta)
    L0 = find_edge(_poly(cfg.model, N))
    values: dict[str, Any] = {"L0": L0, "delta": delta, "part": cfg.part}
    _regime_flag(cfg, values)
    gates = {}
    if cfg.part == "edge":
        excess = np.maximum(_col(records, "mu_N") - L0 - _col(records, "Z"), 0.0)
        q99 = float(np.quantile(excess, 0.99))
        bound = cfg.prefactor * N ** (-0.5 - delta) / q * N ** cfg.eps0
        values.update({"excess_q99": q99, "excess_q99_scaled": q99 * N ** (0.5 + delta) * q, "bound": bound})
        gates["edge_q99"] = Gate(q99, "<=", cfg.gate("edge_scale", 1.0) * bound)
        return values, gates, _hist_rows("excess", excess)
    if cfg.part != "count":
        raise ConfigError("rigidity.part must be 'count' or 'edge'")
    # the counting estimate holds on [-1/2, L0 + Z - 2 N^(-1/2-delta) / q];
    # intervals leaving it (for some sample) are reported but not gated
    right = L0 + float(_col(records, "Z").min()) - 2 * N ** (-0.5 - delta) / q
    values["window_right"] = right
    for k, (a, b) in enumerate(cfg.intervals):
        if a > b:
            raise ConfigError(f"interval {k} = [{a}, {b}] is empty")
        dev = np.abs(_col(records, f"count_{k}") / N - _col(records, f"rho_{k}"))
        bound = cfg.prefactor * (1.0 / N + math.sqrt((b - a) / (N * q**3)))
        inside = a >= -0.5 and b <= right
        values[f"interval_{k}"] = {
            "a": a,
            "b": b,
            "max_dev": float(dev.max()),
            "bound": bound,
            "mean_count": float(_col(records, f"count_{k}").mean()),
            "mean_rho": float(_col(records, f"rho_{k}").mean()),
            "gated": inside,
        }
        if inside:
            gates[f"count_{k}"] = Gate(float(dev.max()), "<=", cfg.gate("count_scale", 1.0) * bound)
    return values, gates, []


def _in_domain(z: complex, N: int, c: float) -> bool:
    return abs(z.real) <= 10 and N ** (-1 + c) <= z.imag <= 10


def _agg_psmall(cfg, records):
    values: dict[str, Any] = {}
    gates: dict[str, Gate] = {}
    factor = cfg.gate("bound_factor", 5.0)
    for k, z in enumerate(cfg.z_probes):
        trend = []
        for N in cfg.Ns:
            if not _in_domain(z, N, cfg.domain_c):
                raise ConfigError(f"probe {z} outside the spectral domain at N={N}")
            P = _col(records, f"P_re_{k}", N) + 1j * _col(records, f"P_im_{k}", N)
            gam = _col(records, f"Gamma_{k}", N)
            mean = complex(P.mean())
            se = math.sqrt((_var(P.real) + _var(P.imag)) / len(P))
            scale = float(gam.mean()) + 1.0 / N
            entry = {
                "abs_mean_P": abs(mean),
                "se_mean_P": se,
                "mean_Gamma": float(gam.mean()),
                "bound": factor * scale,
                "normalized": abs(mean) / scale,
                "normalized_se": se / scale,
                "spread_ratio": math.sqrt(_var(P.real) + _var(P.imag)) / abs(mean) if mean else float("inf"),
            }
            values[f"z{k}_N{N}"] = entry
            gates[f"bound_z{k}_N{N}"] = Gate(abs(mean), "<=", entry["bound"])
            gates[f"spread_z{k}_N{N}"] = Gate(entry["spread_ratio"], ">=", cfg.gate("spread_min", 3.0))
            trend.append(entry)
        worst = 0.0
        for a, b in zip(trend, trend[1:]):
            slack = 2 * math.hypot(a["normalized_se"], b["normalized_se"])
            worst = max(worst, b["normalized"] - a["normalized"] - slack)
        values[f"z{k}_trend_excess"] = worst
        if len(trend) > 1:
            gates[f"trend_z{k}"] = Gate(worst, "<=", 0.0)
    return values, gates, []


_AGGREGATORS = {
    "z-clt": _agg_zclt,
    "edge": _agg_edge,
    "rescale": _agg_rescale,
    "bulk": _agg_bulk,
    "joint": _agg_joint,
    "rigidity": _agg_rigidity,
    "p-small": _agg_psmall,
}


def validate(cfg: ExperimentConfig) -> None:
    """Checks that do not need samples."""
    if cfg.experiment in ("bulk", "joint"):
        _check_window(cfg, cfg.indices)
        if cfg.model.N > ensemble.dense_cap():
            raise ConfigError("bulk experiments need N within the dense cap")
    if cfg.experiment == "rigidity" and cfg.part not in ("count", "edge"):
        raise ConfigError("rigidity.part must be 'count' or 'edge'")
    if cfg.experiment == "p-small":
        if not cfg.z_probes:
            raise ConfigError("p-small needs z_probes")
        for z in cfg.z_probes:
            for N in cfg.Ns:
                if not _in_domain(z, N, cfg.domain_c):
                    raise ConfigError(f"probe {z} outside the spectral domain at N={N}")
    if cfg.experiment == "rescale" and cfg.model.kind != "erdos_renyi":
        raise ConfigError("rescale needs an Erdos-Renyi model")


def aggregate(cfg: ExperimentConfig, records: list[dict]) -> EnsembleStats:
    values, gates, plot = _AGGREGATORS[cfg.experiment](cfg, records)
    return EnsembleStats(cfg.experiment, values, gates, records, plot)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> EnsembleStats:
    validate(cfg)
    return aggregate(cfg, collect_records(cfg, workers))


def _k_stieltjes(job):
    spec, N, seed, z = job
    with threadpool_limits(1):
        s = ensemble.sample(_model(spec, N), seed)
        g = spectra.stieltjes(spectra.full_spectrum(s), z).ulG
    return g


def mean_stieltjes(spec: ModelSpec, M: int, master_seed: int, z: complex, workers: int = 1) -> tuple[complex, float]:
    """Ensemble mean of the normalized resolvent trace at ``z`` and its standard error.

    The error is the norm of the (real, imaginary) standard errors.
    """
    N = spec.N
    jobs = [(spec, N, derive_seed(derive_seed(master_seed, N), i), z) for i in range(M)]
    if workers <= 1:
        g = np.array([_k_stieltjes(j) for j in jobs])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            g = np.array(list(pool.map(_k_stieltjes, jobs, chunksize=max(1, M // (4 * workers)))))
    se = math.sqrt((_var(g.real) + _var(g.imag)) / M)
    return complex(g.mean()), se


def run_z_clt(cfg):
    return run_experiment(replace(cfg, experiment="z-clt"))


def run_edge_fluctuation(cfg):
    return run_experiment(replace(cfg, experiment="edge"))


def run_bulk_fluctuation(cfg):
    return run_experiment(replace(cfg, experiment="bulk"))


def run_rescaling(cfg):
    return run_experiment(replace(cfg, experiment="rescale"))


def run_joint(cfg):
    return run_experiment(replace(cfg, experiment="joint"))


def run_rigidity(cfg):
    return run_experiment(replace(cfg, experiment="rigidity"))


def run_p_smallness(cfg):
    return run_experiment(replace(cfg, experiment="p-small"))
