"""Online KL-floor verification for fixed-BN runs at several gamma values."""

import argparse
from pathlib import Path

from bnvae import presets
from bnvae.train import train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.3, 0.6, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/floor")
    args = ap.parse_args()
    print("gamma,checked_batches,violations,verdict")
    for gamma in args.gammas:
        cfg = presets.lm_contrast("fixed_bn", gamma, args.seed, str(Path(args.out) / f"g{gamma}"), args.epochs)
        floor = train_run(cfg).summary["kl_floor"]
        print(f"{gamma},{floor['checked_batches']},{floor['violations']},{floor['verdict']}", flush=True)


if __name__ == "__main__":
    main()
