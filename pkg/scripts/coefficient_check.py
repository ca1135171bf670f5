"""Compare the ensemble mean of the resolvent trace with the root of the
constructed polynomial, and with the polynomial missing its x^4 term.

Usage: python scripts/coefficient_check.py [--M 10000] [--workers K]
"""

import argparse
from dataclasses import replace

from sparse_lab.experiments import ModelSpec, mean_stieltjes
from sparse_lab.formalcalc import build_P0
from sparse_lab.scmeasure import solve_m


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=1500)
    ap.add_argument("--beta", type=float, default=0.25)
    ap.add_argument("--M", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=4100)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    z = 2.5j
    spec = ModelSpec("erdos_renyi", args.N, beta=args.beta)
    poly = build_P0(spec.build())
    dropped = replace(poly, a=tuple(0.0 if i == 1 else a for i, a in enumerate(poly.a)))
    mean, se = mean_stieltjes(spec, args.M, args.seed, z, args.workers)
    for label, p in (("full", poly), ("no x^4", dropped)):
        m0 = solve_m(p, 0.0, z)
        print(f"{label:8s} m0={m0:.10f}  |mean - m0| / se = {abs(mean - m0) / se:.2f}")
    print(f"mean={mean:.10f} se={se:.3g}")


if __name__ == "__main__":
    main()
