"""Command-line entry point: ``sparse-lab <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import __version__
from .ensemble import make_custom_model, make_er_model, make_rademacher_model
from .errors import ConfigError, ContinuationError, SparseLabError, ShapeError
from .experiments import EXPERIMENTS, config_from_dict, config_to_dict, records_csv, run_experiment, validate
from .formalcalc import SelfConsistentPolynomial, build_P0
from .scmeasure import build_measure, find_edge, quantiles

EXIT_GATES = 2
EXIT_BRANCH = 3

GOLDEN_BETAS = (0.1, 0.2, 0.25)
GOLDEN_N = 2000


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_toml(path: Path) -> tuple[dict, bytes]:
    raw = path.read_bytes()
    try:
        return tomllib.loads(raw.decode("utf-8")), raw
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: Path):
    """Parse a TOML experiment config; returns (config, digest)."""
    doc, raw = _read_toml(path)
    return config_from_dict(doc), digest_bytes(raw)


def dump_config(cfg) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def _claim_dir(out: Path, digest: str) -> None:
    """Refuse to mix outputs of different configs in one directory."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    if manifest.exists():
        old = json.loads(manifest.read_text()).get("digest")
        if old != digest:
            raise ConfigError(f"{out} holds outputs of config {old[:12]}..., refusing to mix")


def _write_manifest(out: Path, digest: str, seed, files: list[str]) -> None:
    doc = {
        "digest": digest,
        "master_seed": seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": sorted(files),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# ----------------------------------------------------------------- build-p0

def _parse_p(values, N: int) -> float:
    if values[0] == "auto-beta":
        if len(values) != 2:
            raise ConfigError("--p auto-beta needs one value")
        return N ** (2 * float(values[1]) - 1)
    if len(values) != 1:
        raise ConfigError("--p takes a single number or 'auto-beta b'")
    return float(values[0])


def _model_from_args(args):
    if args.config:
        doc = _read_toml(Path(args.config))[0]
        m = doc.get("model", doc)
        kind, N = m.get("kind"), m.get("N")
        if kind is None or N is None:
            raise ConfigError("model.kind and model.N are required")
        N = int(N)
        if kind == "erdos_renyi":
            p = m.get("p")
            if p is None:
                if "beta" not in m:
                    raise ConfigError("model needs p or beta")
                p = N ** (2 * float(m["beta"]) - 1)
            return make_er_model(N, float(p), loops=bool(m.get("loops", True)))
        if kind == "sparse_rademacher":
            q = m.get("q", N ** float(m["beta"]) if "beta" in m else None)
            if q is None:
                raise ConfigError("model needs q or beta")
            return make_rademacher_model(N, float(q))
        return make_custom_model(N, m.get("kappas", [1.0]), m.get("q"))
    kind = {"er": "erdos_renyi", "rademacher": "sparse_rademacher"}.get(args.model, args.model)
    N = args.N
    if N is None:
        raise ConfigError("--N is required")
    if kind == "erdos_renyi":
        if not args.p:
            raise ConfigError("--p is required for the er model")
        return make_er_model(N, _parse_p(args.p, N), loops=not args.no_loops)
    if kind == "sparse_rademacher":
        q = args.q if args.q is not None else (N ** args.beta if args.beta is not None else None)
        if q is None:
            raise ConfigError("--q or --beta is required for the rademacher model")
        return make_rademacher_model(N, q)
    if kind == "custom":
        kappas = [float(k) for k in (args.kappas or "1").split(",")]
        return make_custom_model(N, kappas, args.q)
    raise ConfigError(f"unknown model {args.model!r}")


def cmd_build_p0(args) -> int:
    model = _model_from_args(args)
    poly = build_P0(model)
    if args.config:
        digest = digest_bytes(Path(args.config).read_bytes())
    else:
        keys = ("model", "N", "p", "q", "beta", "kappas", "no_loops")
        digest = digest_bytes(json.dumps({k: getattr(args, k) for k in keys}, sort_keys=True).encode())
    out = Path(args.out_dir)
    _claim_dir(out, digest)
    # JSON has no comment syntax; the digest sits in the table and the manifest
    _write(out / "p0.json", poly.to_json())
    _write(out / "p0_table.txt", f"# digest={digest}\n" + poly.table())
    _write_manifest(out, digest, None, ["p0.json", "p0_table.txt"])
    print(poly.table(), end="")
    return 0


# ------------------------------------------------------------ solve-measure

def cmd_solve_measure(args) -> int:
    path = Path(args.p0)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    raw = path.read_bytes()
    poly = SelfConsistentPolynomial.from_json(raw.decode())
    if abs(args.Z) > 0.5:
        raise ConfigError("|Z| must be at most 0.5")
    digest = digest_bytes(raw + repr(args.Z).encode())
    out = Path(args.out_dir)
    _claim_dir(out, digest)
    try:
        L0 = find_edge(poly, 0.0)
        measure = build_measure(poly, args.Z, args.grid)
        table = quantiles(measure, args.quantile_N)
    except (ContinuationError, ShapeError) as exc:
        print(f"branch failure: {exc}", file=sys.stderr)
        return EXIT_BRANCH
    head = f"# digest={digest}\n# L={measure.edge_L:.6f} L0={L0:.6f} Z={args.Z!r} mass={float(measure.mass)!r}\n"
    _write(out / "measure.csv", head + measure.to_csv())
    _write(out / "quantiles.csv", f"# digest={digest}\n" + table.to_csv())
    _write_manifest(out, digest, None, ["measure.csv", "quantiles.csv"])
    print(f"L={measure.edge_L:.6f} L0={L0:.6f}")
    return 0


# --------------------------------------------------------------- experiment

def cmd_experiment(args) -> int:
    if args.name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.name!r}; choose from {', '.join(EXPERIMENTS)}")
    cfg, digest = load_config(Path(args.config))
    if cfg.experiment != args.name:
        raise ConfigError(f"config describes experiment {cfg.experiment!r}, not {args.name!r}")
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
        digest = digest_bytes(f"{digest}:{args.seed}".encode())
    if args.gate_scale != 1.0:
        cfg = cfg.scaled_gates(args.gate_scale)
        digest = digest_bytes(f"{digest}:gate-scale={args.gate_scale!r}".encode())
    out = Path(args.out_dir)
    _claim_dir(out, digest)
    try:
        result = run_experiment(cfg, workers=args.workers)
    except (ContinuationError, ShapeError) as exc:
        print(f"branch failure: {exc}", file=sys.stderr)
        return EXIT_BRANCH
    _write(out / "records.csv", records_csv(result.records, f"digest={digest}"))
    _write(out / "stats.json", result.to_json(digest))
    _write(out / "plotdata.csv", records_csv(result.plotdata, f"digest={digest}"))
    _write_manifest(out, digest, cfg.master_seed, ["records.csv", "stats.json", "plotdata.csv"])
    if not result.passed:
        print("failing gates: " + ", ".join(result.failing), file=sys.stderr)
        return EXIT_GATES
    return 0


def cmd_validate_config(args) -> int:
    cfg, digest = load_config(Path(args.config))
    validate(cfg)
    print(f"ok {cfg.experiment} digest={digest}")
    return 0


def cmd_golden_update(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for beta in GOLDEN_BETAS:
        er = make_er_model(GOLDEN_N, GOLDEN_N ** (2 * beta - 1))
        rad = make_rademacher_model(GOLDEN_N, GOLDEN_N**beta)
        for name, model in (("er", er), ("rademacher", rad)):
            _write(out / f"p0_{name}_beta{beta}.json", build_P0(model).to_json())
    print(f"wrote {2 * len(GOLDEN_BETAS)} files to {out}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-p0", help="construct the self-consistent polynomial")
    p.add_argument("--config", help="TOML file with a [model] table")
    p.add_argument("--model", default="er", help="er, rademacher or custom")
    p.add_argument("--N", type=int)
    p.add_argument("--p", nargs="+", metavar="P", help="edge probability, or 'auto-beta b' for p = N^(2b-1)")
    p.add_argument("--q", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--kappas", help="comma-separated normalized cumulants from order 2")
    p.add_argument("--no-loops", action="store_true")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_build_p0)

    p = sub.add_parser("solve-measure", help="density and quantiles from p0.json")
    p.add_argument("p0")
    p.add_argument("--Z", type=float, default=0.0)
    p.add_argument("--grid", type=int, default=4001)
    p.add_argument("--quantile-N", type=int, default=1000)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_solve_measure)

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment")
    p.add_argument("name", help=", ".join(EXPERIMENTS))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--gate-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("validate-config", help="parse and check an experiment config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate_config)

    p = sub.add_parser("golden-update", help="regenerate golden polynomial files")
    p.add_argument("--out-dir", default="tests/golden")
    p.set_defaults(func=cmd_golden_update)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        parser.error(str(exc))
    except SparseLabError as exc:
        parser.error(f"{type(exc).__name__}: {exc}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
