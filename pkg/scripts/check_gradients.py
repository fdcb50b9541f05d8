"""Finite-difference gradient check and oracle sweep for every variant.

    python scripts/check_gradients.py --dim 4 --instances 100
"""

import argparse
import time

from mimn.model import VARIANTS
from mimn.verify import gradcheck, oracle_sweep, tiny_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--instances", type=int, default=100)
    args = ap.parse_args()

    for variant in VARIANTS:
        start = time.perf_counter()
        report = gradcheck(tiny_config(variant, args.dim), seed=args.seed)
        worst = ", ".join(f"{name} {err:.1e}" for name, err in report.worst(3))
        print(f"{variant:<18} {'pass' if report.passed else 'FAIL'}  max rel {report.max_rel:.1e}  "
              f"[{worst}]  {time.perf_counter() - start:.1f} s", flush=True)
    sweep = oracle_sweep(args.instances, seed=args.seed, dim=args.dim)
    print(f"oracle sweep over {args.instances} instances: worst diff {sweep.worst:.1e} "
          f"({'pass' if sweep.passed else 'FAIL'})")


if __name__ == "__main__":
    main()
