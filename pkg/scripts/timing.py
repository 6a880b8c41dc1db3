"""Training wall-clock of BN-VAE relative to a plain VAE at identical configuration."""

import argparse
from pathlib import Path

from bnvae import presets
from bnvae.train import train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/timing")
    args = ap.parse_args()
    totals = {"none": 0.0, "fixed_bn": 0.0}
    for seed in args.seeds:
        for kind in totals:
            cfg = presets.lm_contrast(kind, 0.6, seed, str(Path(args.out) / f"{kind}_s{seed}"), args.epochs)
            totals[kind] += train_run(cfg).summary["train_seconds"]
    print(f"plain {totals['none']:.2f}s  bn {totals['fixed_bn']:.2f}s  ratio {totals['fixed_bn'] / totals['none']:.3f}")


if __name__ == "__main__":
    main()
