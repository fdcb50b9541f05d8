"""Best validation accuracy per variant and seed on the toy corpus.

    python scripts/run_ablation.py --seeds 0 1 2 --json ablation.json
"""

import argparse
import json

from mimn.experiments import ToyProtocol, ablation
from mimn.model import VARIANTS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS,
                    default=["full", "no_memory", "mixed_single_turn"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--json", help="also write the table here")
    args = ap.parse_args()

    runs: dict = {}
    for variant in args.variants:
        for seed in args.seeds:
            ablation([variant], [seed], ToyProtocol(), runs)
            run = runs[variant, seed]
            print(f"{variant:<18} seed {seed}  valid {run.best_valid:.4f}  "
                  f"epochs {len(run.result.history)}  {run.seconds:.0f} s", flush=True)
    table = ablation(args.variants, args.seeds, ToyProtocol(), runs)
    print()
    for variant, row in table.items():
        print(f"{variant:<18} mean {row['mean']:.4f}  per seed {[round(a, 4) for a in row['per_seed']]}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
