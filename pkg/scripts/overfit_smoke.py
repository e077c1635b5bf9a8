"""Memorise a 100-sample synthetic set with the 3x3 model.

    python3 scripts/overfit_smoke.py --out runs/smoke
"""

import argparse

from easter.experiments import overfit_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--target", type=float, default=0.05, help="stop once training CER is below this")
    p.add_argument("--preset", default="3x3")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    r = overfit_smoke(args.out, args.size, args.max_steps, args.target, seed=args.seed, preset=args.preset, log=print)
    print(f"steps={r.steps} train_cer={r.cer:.4f} exact={r.exact_match:.3f} minutes={r.seconds / 60:.1f}")


if __name__ == "__main__":
    main()
