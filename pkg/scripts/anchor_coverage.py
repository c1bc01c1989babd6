"""Mean max-IoU of each anchor design over faces of 4-32 px, swept over every sub-stride offset."""

import argparse

from smallface.anchors import baseline_design, coverage_histogram, sfs_design


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--step", type=float, default=1.0, help="offset sweep step in px")
    ap.add_argument("--min-side", type=int, default=4)
    ap.add_argument("--max-side", type=int, default=32)
    args = ap.parse_args()

    sides = range(args.min_side, args.max_side + 1)
    designs = {"sfs": sfs_design(), "bs4": baseline_design(4), "bs8": baseline_design(8),
               "bs16": baseline_design(16)}
    per_side = {}
    for name, d in designs.items():
        _, summaries = coverage_histogram(d, sides, step=args.step)
        per_side[name] = [s.mean for s in summaries]
    print("side " + " ".join(f"{n:>7}" for n in designs))
    for i, s in enumerate(sides):
        print(f"{s:4d} " + " ".join(f"{per_side[n][i]:7.4f}" for n in designs))
    print("mean " + " ".join(f"{sum(v) / len(v):7.4f}" for v in per_side.values()))


if __name__ == "__main__":
    main()
