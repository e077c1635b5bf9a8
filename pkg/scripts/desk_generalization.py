"""Train on 2,000 generated alphanumeric strings with augmentation, score 200 held-out samples.

    python3 scripts/desk_generalization.py --out runs/desk
"""

import argparse

from easter.experiments import desk_generalization


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--max-steps", type=int, default=6000)
    p.add_argument("--eval-interval", type=int, default=500)
    p.add_argument("--alpha", type=float, default=None, help="weighted-CTC alpha (default: plain CTC)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    r = desk_generalization(
        args.out, args.train_size, args.test_size, args.max_steps, args.eval_interval, args.seed,
        None if args.no_augment else "default", args.alpha, log=print,
    )
    print(f"steps={r.steps} test_cer={r.cer:.4f} exact_match={r.exact_match:.3f} minutes={r.seconds / 60:.1f}")


if __name__ == "__main__":
    main()
