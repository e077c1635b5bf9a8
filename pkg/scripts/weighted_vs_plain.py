"""Steps needed to reach a training-CER threshold with weighted vs plain CTC, over several seeds.

    python3 scripts/weighted_vs_plain.py --out runs/wctc --seeds 0 1 2
"""

import argparse
import statistics

from easter.experiments import steps_to_threshold


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/wctc")
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--max-steps", type=int, default=3000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--preset", default="3x3")
    args = p.parse_args()
    cap = args.max_steps + 1  # "never reached" ranks after every real count
    results = {}
    for label, alpha in (("weighted", args.alpha), ("plain", None)):
        steps = []
        for seed in args.seeds:
            s = steps_to_threshold(args.out, alpha, seed, args.size, args.threshold, args.max_steps, preset=args.preset)
            print(f"{label} seed={seed} steps={s}", flush=True)
            steps.append(cap if s is None else s)
        results[label] = statistics.median(steps)
    print("\t".join(["variant", "median_steps"]))
    for label, med in results.items():
        print(f"{label}\t{med}")
    print("weighted no slower:", results["weighted"] <= results["plain"])


if __name__ == "__main__":
    main()
