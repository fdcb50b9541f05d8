"""Train one variant on the toy corpus and print per-epoch progress.

    python scripts/run_toy.py --variant full --seed 0 --out runs/toy_full
"""

import argparse
import json
from pathlib import Path

from mimn.experiments import ToyProtocol, toy_run
from mimn.model import VARIANTS
from mimn.train import evaluate, history_json, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", choices=VARIANTS, default="full")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="directory for best.ckpt and history.json")
    args = ap.parse_args()

    def progress(row):
        print(f"epoch {row['epoch']:>2}  loss {row['train_loss']:.4f}  "
              f"train {row['train_accuracy']:.3f}  valid {row['valid_accuracy']:.3f}", flush=True)

    run = toy_run(args.variant, args.seed, ToyProtocol(), progress=progress)
    tr, va, te = run.splits
    summary = {"variant": args.variant, "seed": args.seed, "best_epoch": run.result.best_epoch,
               "seconds": round(run.seconds, 1),
               **{name: evaluate(run.result.best, split)["accuracy"]
                  for name, split in (("train", tr), ("valid", va), ("test", te))}}
    print(json.dumps(summary, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run.result.best, out / "best.ckpt")
        (out / "history.json").write_text(history_json(run.result.history, summary), encoding="utf-8")


if __name__ == "__main__":
    main()
