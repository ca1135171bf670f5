"""Run every experiment config in scripts/configs through the CLI.

Usage: python scripts/run_all.py [--workers K] [--out results] [names ...]
"""

import argparse
import sys
import time
from pathlib import Path

from sparse_lab.cli import main as cli_main

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

HERE = Path(__file__).resolve().parent


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="config stems, default all")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    configs = sorted((HERE / "configs").glob("*.toml"))
    if args.names:
        configs = [c for c in configs if c.stem in args.names]
    worst = 0
    for cfg in configs:
        name = tomllib.loads(cfg.read_text())["experiment"]
        t0 = time.perf_counter()
        code = cli_main(
            ["experiment", name, "--config", str(cfg), "--workers", str(args.workers),
             "--out-dir", str(Path(args.out) / cfg.stem)]
        )
        print(f"{cfg.stem:16s} exit={code} {time.perf_counter() - t0:7.1f}s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
