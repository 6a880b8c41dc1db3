"""Command-line entry point: ``bnvae {train,eval,probe,synth-data,gradcheck,report}``.

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, TrainConfig, apply_overrides, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# shorthand flags for the most common overrides
_FLAG_KEYS = {
    "task": "task",
    "regularizer": "regularizer.kind",
    "gamma": "regularizer.gamma",
    "latent": "model.latent",
    "epochs": "max_epochs",
    "batch_size": "batch_size",
    "lr": "optim.lr",
    "output_dir": "output_dir",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for key, dotted in _FLAG_KEYS.items():
        value = getattr(args, key, None)
        if value is not None:
            out[dotted] = value
    if getattr(args, "seed", None) is not None:
        out.update({"seeds.init": args.seed, "seeds.data": args.seed, "seeds.noise": args.seed})
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    return apply_overrides(cfg, _overrides(args))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. regularizer.gamma=0.6")
    p.add_argument("--task", choices=["vae", "cvae", "lm"])
    p.add_argument("--regularizer", choices=["none", "fixed_bn", "extended_bn", "delta", "free_bits"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--latent", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="sets init, data and noise seeds")
    p.add_argument("--output-dir")


def _run_config(run_dir: Path) -> TrainConfig:
    return load_config(run_dir / "config.json")


def cmd_train(args) -> int:
    from .train import train_run

    cfg = resolve_config(args)
    arts = train_run(cfg)
    print(json.dumps(arts.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import build_data, eval_run

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    cfg = load_config(args.config) if args.config else _run_config(ckpt.parent)
    _, valid = build_data(cfg)
    which = tuple(m.strip() for m in args.metrics.split(","))
    report = eval_run(ckpt, valid, which, k=args.k, seed=args.seed, eval_size=cfg.eval.eval_size,
                      mi_samples=cfg.eval.mi_samples, iw_size=args.iw_size)
    text = json.dumps(asdict(report), indent=2, sort_keys=True, default=str)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(report), sort_keys=True, default=str) + "\n")
    print(text)
    return EXIT_OK


def cmd_probe(args) -> int:
    import numpy as np

    from .train import build_data, probe_run

    run_dir = Path(args.run_dir)
    cfg = _run_config(run_dir)
    ckpts = {}
    for path in run_dir.glob("ckpt_epoch*.bin"):
        m = re.fullmatch(r"ckpt_epoch(\d+)\.bin", path.name)
        if m:
            ckpts[int(m.group(1))] = path
    if not ckpts:
        raise FileNotFoundError(f"no ckpt_epoch*.bin files in {run_dir}")
    _, valid = build_data(cfg)
    probe = valid.subset(range(min(cfg.eval.probe_size, len(valid))))
    grid = np.linspace(-cfg.eval.grid_limit, cfg.eval.grid_limit, cfg.eval.grid_points)
    out = probe_run(ckpts, probe, args.out or run_dir / "trajectory_probe.csv", grid)
    print(out)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .data import SyntheticSpec, export_corpus, gen_synth_lm, gen_synth_pairs, synthetic_vocab

    spec = SyntheticSpec(args.components, args.vocab_size, args.min_len, args.max_len, args.size, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = synthetic_vocab(spec)
    vocab.save(out / "vocab.txt")
    for split, size, seed in (("train", args.size, args.seed), ("valid", args.valid_size, args.seed + 7919)):
        if args.pairs:
            ds = gen_synth_pairs(spec, args.response_rule, size=size, seed=seed)
            export_corpus(ds, vocab, out / f"{split}.src.txt", out / f"{split}.labels.txt", out / f"{split}.tgt.txt")
        else:
            ds = gen_synth_lm(spec, size=size, seed=seed)
            export_corpus(ds, vocab, out / f"{split}.txt", out / f"{split}.labels.txt")
    print(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import loss_gradcheck

    worst = 0.0
    for i in range(args.configs):
        res = loss_gradcheck(args.task, args.regularizer, args.seed + i, ["lstm", "gru"][i % 2],
                             embed=3, hidden=3, latent=2, batch_size=3 + i % 3)
        status = "skipped: " + res.reason if res.skipped else f"{res.max_rel_error:.3e}"
        print(f"config {i}: {status}")
        if not res.skipped:
            worst = max(worst, res.max_rel_error)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else 1


def cmd_report(args) -> int:
    from .train import emit_reports

    print(json.dumps(emit_reports(args.run_dir), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnvae", description="Batch-normalized VAE experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write run artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on validation data")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="config used to rebuild data (default: config.json beside the checkpoint)")
    p.add_argument("--metrics", default="recon,kl,mi,au,iw_nll")
    p.add_argument("--k", type=int, default=500, help="importance samples")
    p.add_argument("--iw-size", type=int, default=None, help="sequences for IW-NLL (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="append the report as one JSON line")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="trajectory CSV from a run's ckpt_epoch*.bin files")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("synth-data", help="export the synthetic Markov-mixture corpus as text")
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--size", type=int, default=10_000)
    p.add_argument("--valid-size", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", action="store_true")
    p.add_argument("--response-rule", default="distinct", choices=["identity", "distinct"])
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    p.add_argument("--task", default="vae", choices=["vae", "cvae", "lm"])
    p.add_argument("--regularizer", default="fixed_bn")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="write summary.json for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .train import NumericAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
