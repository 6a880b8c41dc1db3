"""Plain VAE vs BN-VAE(gamma) on the synthetic LM task: final KL, MI, AU and a linear probe on posterior means."""

import argparse
import csv
from pathlib import Path

from bnvae import presets
from bnvae.train import train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--gamma", type=float, default=0.6)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/collapse")
    args = ap.parse_args()
    print("model,seed,kl,mi,au,probe_acc,seconds")
    for seed in args.seeds:
        for kind in ("none", "fixed_bn"):
            run_dir = Path(args.out) / f"{kind}_s{seed}"
            cfg = presets.lm_contrast(kind, args.gamma, seed, str(run_dir), args.epochs)
            arts = train_run(cfg)
            last = list(csv.DictReader(open(arts.metrics_csv)))[-1]
            acc = presets.probe_accuracy(run_dir, cfg).accuracy
            print(f"{kind},{seed},{last['kl_raw']},{last['mi']},{last['au']},{acc:.4f},{last['seconds']}", flush=True)


if __name__ == "__main__":
    main()
