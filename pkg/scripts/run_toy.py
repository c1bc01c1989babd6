"""Train and score the SFA toy model and the three-branch baseline on seeded synthetic scenes.

    python3 scripts/run_toy.py --out runs/toy
"""

import argparse
import json
import time

from smallface.experiments import VARIANTS, ToyConfig, load_or_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy", help="cache directory for trained weights and results")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--steps", type=int, default=ToyConfig.steps)
    ap.add_argument("--print-every", type=int, default=250)
    args = ap.parse_args()

    t0 = time.perf_counter()

    def progress(rec):
        if rec["iter"] % args.print_every == 0:
            print(f"  iter {rec['iter']:5d} loss {rec['loss']:.4f} lr {rec['lr']:g} "
                  f"[{time.perf_counter() - t0:.0f}s]", flush=True)

    for v in args.variants.split(","):
        print(f"{v}:", flush=True)
        _, res = load_or_train(ToyConfig(variant=v, steps=args.steps), args.out, progress)
        print(json.dumps({k: res[k] for k in ("variant", "steps", "train_seconds", "ap")}, indent=2))


if __name__ == "__main__":
    main()
