"""Scalar-latent runs with trajectory probes: plain VAE and BN-VAE(gamma=1)."""

import argparse
from pathlib import Path

from bnvae import presets
from bnvae.train import train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/lagging")
    args = ap.parse_args()
    print("model,seed,epoch,max_abs_mu_model,var_mu_inference,corr")
    for seed in args.seeds:
        for kind in ("none", "fixed_bn"):
            cfg = presets.lagging_probe(kind, 1.0, seed, str(Path(args.out) / f"{kind}_s{seed}"), args.epochs)
            arts = train_run(cfg)
            for epoch, mx, var, corr in presets.trajectory_summary(arts.trajectory_csv):
                print(f"{kind},{seed},{epoch},{mx:.4g},{var:.4g},{corr:.4f}", flush=True)


if __name__ == "__main__":
    main()
