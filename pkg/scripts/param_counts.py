"""Print parameter counts for every preset at a given vocabulary.

    python3 scripts/param_counts.py --vocab alnum
"""

import argparse

from easter.ctc import Vocabulary
from easter.model import PRESETS, analytic_param_count, build, param_count


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vocab", default="alnum")
    args = p.parse_args()
    vocab = Vocabulary.named(args.vocab)
    print("preset\tlayers\tparams\tanalytic")
    for name, make in PRESETS.items():
        config = make(vocab)
        print(f"{name}\t{config.num_layers}\t{param_count(build(config, 0))}\t{analytic_param_count(config)}")


if __name__ == "__main__":
    main()
