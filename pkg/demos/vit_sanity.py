"""Train the toy vision transformer on the default synthetic set and retrieve
on a freshly generated set of the same size.

    python demos/vit_sanity.py --epochs 120
"""

import argparse

import numpy as np

from sbirlab.encoders import VitEncoderConfig, forward, init_params
from sbirlab.experiments import vit_sanity


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=120)
    args = ap.parse_args()

    cfg = VitEncoderConfig()
    x = np.random.default_rng(args.seed).random((4, 1, 32, 32))
    probs = forward(init_params(cfg, args.seed), cfg, x).attention
    print("attention maps:", [p.shape for p in probs],
          "max |row sum - 1|:", max(float(np.abs(p.sum(-1) - 1).max()) for p in probs))

    run = vit_sanity(seed=args.seed, epochs=args.epochs, check_epoch=min(20, args.epochs))
    h = run.loss_history
    print("mean loss per epoch:", " ".join(f"{v:.2f}" for v in h[:: max(1, len(h) // 12)]))
    print(f"loss after {run.check_epoch} epochs / first epoch: {run.loss_ratio:.3f}")
    print(f"held-out recall@1 {run.recall_at_1:.3f} over {run.gallery_size} photos "
          f"({run.recall_at_1 / run.chance:.1f}x chance)")


if __name__ == "__main__":
    main()
