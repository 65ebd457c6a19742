"""Train a baseline CNN per seed on the default synthetic set, finetune it four
ways (continued baseline, flip sampler, category sampler, 2x2 pooling head)
and print the held-out metrics side by side.

    python demos/direction_study.py            # five seeds, about 20 minutes
    python demos/direction_study.py --seeds 0  # one seed
"""

import argparse
import logging
import time

from sbirlab.experiments import VARIANTS, direction_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    start = time.perf_counter()
    summary = direction_study(args.seeds)
    names = ["base", *VARIANTS]
    print(f"{len(args.seeds)} seed(s) in {time.perf_counter() - start:.0f}s\n")
    print(f"{'model':<12}{'recall@1':>10}{'recall@2':>10}{'flip conf.':>12}  cat. mismatches per seed")
    for name in names:
        counts = [r[name].category_mismatch_count for r in summary.reports]
        print(f"{name:<12}{summary.mean_recall(name, 1):>10.3f}{summary.mean_recall(name, 2):>10.3f}"
              f"{summary.mean_flip(name):>12.3f}  {counts}")
    print(f"\nrecall@1 gain of the 2x2 head over the continued baseline: "
          f"{summary.recall_gain('spatial2x2'):+.3f}")
    pct = summary.mismatch_improvements()
    print("category-mismatch improvement of the category sampler (%, per seed):",
          ["n/a" if p is None else round(p, 1) for p in pct])


if __name__ == "__main__":
    main()
