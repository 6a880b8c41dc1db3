"""Shared experiment configurations and summaries used by scripts/ and the acceptance suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import TrainConfig
from .latent import RegularizerConfig


def lm_contrast(regularizer: str = "none", gamma: float = 0.6, seed: int = 0, output_dir: str = "runs/lm",
                epochs: int = 20, train_size: int = 10_000) -> TrainConfig:
    """Synthetic LM task, n = 8, linear warm-up over 10 epochs."""
    cfg = TrainConfig(task="vae", output_dir=output_dir, max_epochs=epochs)
    cfg.data.train_size = train_size
    cfg.regularizer = RegularizerConfig(kind=regularizer, gamma=gamma)
    cfg.seeds.init = cfg.seeds.data = cfg.seeds.noise = seed
    cfg.eval.iw_size = 0
    return cfg.validate()


def lagging_probe(regularizer: str = "none", gamma: float = 1.0, seed: int = 0, output_dir: str = "runs/probe",
                  epochs: int = 20, probe_epochs=(0, 1, 2, 5, 10, 20)) -> TrainConfig:
    """Scalar latent with a trajectory probe at selected epochs."""
    cfg = lm_contrast(regularizer, gamma, seed, output_dir, epochs)
    cfg.model.latent = 1
    cfg.eval.probe_epochs = sorted(e for e in probe_epochs if e <= epochs)
    return cfg.validate()


def cvae_contrast(regularizer: str = "none", gamma: float = 0.6, seed: int = 0, output_dir: str = "runs/cvae",
                  epochs: int = 20, anchor: bool | None = None, train_size: int = 10_000) -> TrainConfig:
    """Paired synthetic task. The plain baseline has no anchor term, the BN variant keeps it."""
    cfg = TrainConfig(task="cvae", output_dir=output_dir, max_epochs=epochs)
    cfg.data.train_size = train_size
    cfg.regularizer = RegularizerConfig(kind=regularizer, gamma=gamma)
    cfg.anchor = regularizer != "none" if anchor is None else anchor
    cfg.seeds.init = cfg.seeds.data = cfg.seeds.noise = seed
    return cfg.validate()


def probe_accuracy(run_dir, cfg: TrainConfig, n_labeled: int = 100, n_test: int = 900):
    """Linear probe on validation posterior means: first ``n_labeled`` train it, the next ``n_test`` score it."""
    from .metrics import linear_probe, posterior_params
    from .train import build_data, load_model

    _, valid = build_data(cfg)
    model = load_model(Path(run_dir) / "checkpoint.bin")
    tr, te = valid.subset(range(n_labeled)), valid.subset(range(n_labeled, n_labeled + n_test))
    mu_tr, _ = posterior_params(model, tr)
    mu_te, _ = posterior_params(model, te)
    return linear_probe(mu_tr, tr.labels, mu_te, te.labels, seed=0)


def trajectory_summary(path) -> list[tuple[int, float, float, float]]:
    """Per probed epoch: ``(epoch, max |mu_model|, var(mu_inference), corr(mu_model, mu_inference))``."""
    from .train import read_csv

    rows = read_csv(path)
    out = []
    for epoch in sorted({int(r["epoch"]) for r in rows}):
        sel = [r for r in rows if int(r["epoch"]) == epoch]
        mm = np.array([float(r["mu_model"]) for r in sel])
        mi = np.array([float(r["mu_inference"]) for r in sel])
        corr = float(np.corrcoef(mm, mi)[0, 1]) if mm.std() > 0 and mi.std() > 0 else float("nan")
        out.append((epoch, float(np.abs(mm).max()), float(mi.var()), corr))
    return out
