"""Training loop for the VAE / CVAE / LM tasks, evaluation, probing and reports.

A run directory holds::

    config.json          the validated config
    metrics.csv          one row per epoch (METRICS_COLUMNS)
    train_batches.csv    one row per optimizer step, with the KL floor when fixed-BN is on
    trajectory.csv       scalar-latent probe rows (when eval.probe_epochs is set)
    checkpoint.bin       latest end-of-epoch parameters
    ckpt_epoch{E}.bin    checkpoints kept for probing
    summary.json         written by emit_reports
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DomainError, RandomSource, Tape
from .config import ScheduleConfig, TrainConfig
from .data import (
    Dataset,
    SyntheticSpec,
    batchify,
    gen_synth_lm,
    gen_synth_pairs,
    load_corpus,
    load_pairs,
    make_batch,
)
from .metrics import (
    MetricsReport,
    active_units_from_means,
    iw_nll,
    kl_decompose_posteriors,
    posterior_params,
    trajectory_probe,
)
from .models import (
    CVAEModel,
    LMModel,
    ModelConfig,
    VAEModel,
    build_model,
    cvae_loss,
    lm_loss,
    vae_loss,
)
from .nn import NonFiniteError, load_checkpoint, save_checkpoint, sgd_update

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "epoch", "step", "recon", "kl_raw", "kl_weight", "kl_regularized", "anchor_kl",
    "mi", "mi_se", "agg_kl", "au", "iw_nll", "lr", "seconds",
]
TRAJECTORY_COLUMNS = ["epoch", "sample_id", "mu_model", "mu_inference"]
# mean KL on the MI subset and both MC terms, for checking KL = MI + aggKL per evaluation
DECOMPOSITION_COLUMNS = ["epoch", "mean_kl", "mi", "mi_se", "agg_kl", "agg_kl_se"]
BATCH_COLUMNS = ["epoch", "step", "recon", "kl_raw", "kl_weight", "kl_floor"]
FLOOR_SLACK_PER_DIM = 1e-3


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient; earlier artifacts are intact."""


def kl_weight(schedule: ScheduleConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    """KL weight for 0-based ``epoch`` and ``step`` within it."""
    progress = epoch + step / max(steps_per_epoch, 1)
    if schedule.kind == "constant":
        return float(schedule.beta)
    if schedule.kind == "linear":
        if schedule.warm_epochs <= 0:
            return 1.0
        return float(min(1.0, progress / schedule.warm_epochs))
    if schedule.kind == "cyclic":
        tau = (progress % schedule.period) / schedule.period
        return float(min(1.0, tau / schedule.ramp_fraction))
    raise ValueError(f"unknown schedule {schedule.kind!r}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


# -- data and model construction --------------------------------------------------------


def build_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec(d.components, d.vocab_size, d.min_len, d.max_len, d.train_size, d.seed, d.concentration)
        if cfg.task == "cvae":
            train = gen_synth_pairs(spec, d.response_rule)
            valid = gen_synth_pairs(spec, d.response_rule, size=d.valid_size, seed=d.seed + 7919)
        else:
            train = gen_synth_lm(spec)
            valid = gen_synth_lm(spec, size=d.valid_size, seed=d.seed + 7919)
        return train, valid
    if cfg.task == "cvae":
        train, vocab = load_pairs(d.train_path, d.train_target_path, max_vocab=d.max_vocab)
        valid, _ = load_pairs(d.valid_path, d.valid_target_path, vocab=vocab)
    else:
        train, vocab = load_corpus(d.train_path, max_vocab=d.max_vocab, label_path=d.train_label_path)
        valid, _ = load_corpus(d.valid_path, vocab=vocab, label_path=d.valid_label_path)
    return train, valid


def build_from_config(cfg: TrainConfig, vocab_size: int):
    m = cfg.model
    mc = ModelConfig(vocab_size, m.embed, m.hidden, m.latent, m.cell, m.init_range)
    if cfg.task == "lm":
        return LMModel(mc, cfg.seeds.init)
    if cfg.task == "cvae":
        return CVAEModel(mc, cfg.regularizer, cfg.seeds.init, anchor=cfg.anchor)
    return VAEModel(mc, cfg.regularizer, cfg.seeds.init)


def _loss(model, p, batch, weight, noise, train=True, update=True):
    if isinstance(model, LMModel):
        return lm_loss(model, p, batch), None
    if isinstance(model, CVAEModel):
        out = cvae_loss(model, p, batch, weight, noise, train, update)
    else:
        out = vae_loss(model, p, batch, weight, noise, train, update)
    return out.total, out


# -- evaluation --------------------------------------------------------------------------


def evaluate(model, dataset: Dataset, cfg: TrainConfig, source: RandomSource, with_iw: bool = False) -> dict:
    """Eval-mode validation metrics; MI / AU / decomposition on the first eval_size sequences."""
    p = model.store.constants()
    totals = {"recon": 0.0, "kl_raw": 0.0, "kl_regularized": 0.0, "anchor_kl": 0.0}
    n_seen = 0
    for batch in batchify(dataset, 256, bucket=False, seed=None, train=False):
        noise = source.normal((batch.size, getattr(model, "n", 1)))
        total, out = _loss(model, p, batch, 1.0, noise, train=False, update=False)
        if out is None:
            totals["recon"] += float(total.data) * batch.size
        else:
            v = out.values()
            for k in totals:
                if not math.isnan(v[k]):
                    totals[k] += v[k] * batch.size
        n_seen += batch.size
    row = {k: v / n_seen for k, v in totals.items()}
    if isinstance(model, LMModel):
        row.update(kl_raw=math.nan, kl_regularized=math.nan, anchor_kl=math.nan)
        return row
    if not isinstance(model, CVAEModel) or not model.anchor:
        row["anchor_kl"] = math.nan
    subset = dataset.subset(range(min(cfg.eval.eval_size, len(dataset))))
    mu, lv = posterior_params(model, subset)
    row["au"] = active_units_from_means(mu)[0] if len(subset) >= 2 else None
    if isinstance(model, VAEModel):
        dec = kl_decompose_posteriors(mu, lv, source, cfg.eval.mi_samples)
        row.update(mi=dec.mi, mi_se=dec.mi_se, agg_kl=dec.agg_kl, decomposition=dec)
        if with_iw and cfg.eval.iw_size > 0:
            iw_set = dataset.subset(range(min(cfg.eval.iw_size, len(dataset))))
            row["iw_nll"] = iw_nll(model, iw_set, cfg.eval.iw_samples, source)[0]
    return row


def _probe_rows(model, probe: Dataset, cfg: TrainConfig, epoch: int) -> list[list]:
    grid = np.linspace(-cfg.eval.grid_limit, cfg.eval.grid_limit, cfg.eval.grid_points)
    return [[epoch, i, a, b] for i, a, b in trajectory_probe(model, probe, grid)]


# -- training ------------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_csv: Path
    batches_csv: Path
    trajectory_csv: Path | None
    checkpoint: Path
    decomposition_csv: Path | None = None
    summary: dict = field(default_factory=dict)


def train_run(cfg: TrainConfig) -> RunArtifacts:
    """Train per ``cfg``, writing CSVs and checkpoints into ``cfg.output_dir``."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n", encoding="utf-8")
    train, valid = build_data(cfg)
    model = build_from_config(cfg, train.vocab_size)
    uses_bn = getattr(model, "uses_bn", False)
    noise_src = RandomSource(cfg.seeds.noise, stream=1)
    n_latent = getattr(model, "n", 1)
    probe = valid.subset(range(min(cfg.eval.probe_size, len(valid)))) if cfg.eval.probe_epochs else None

    metrics_path, batches_path = out / "metrics.csv", out / "train_batches.csv"
    traj_path = out / "trajectory.csv" if probe is not None else None
    ckpt_path = out / "checkpoint.bin"
    decomp_path = out / "decomposition.csv" if isinstance(model, VAEModel) else None
    arts = RunArtifacts(out, metrics_path, batches_path, traj_path, ckpt_path, decomp_path)
    mf = open(metrics_path, "w", newline="")
    bf = open(batches_path, "w", newline="")
    tf = open(traj_path, "w", newline="") if traj_path else None
    df = open(decomp_path, "w", newline="") if decomp_path else None
    mw, bw = csv.writer(mf), csv.writer(bf)
    mw.writerow(METRICS_COLUMNS)
    bw.writerow(BATCH_COLUMNS)
    tw = csv.writer(tf) if tf else None
    dw = csv.writer(df) if df else None
    if dw:
        dw.writerow(DECOMPOSITION_COLUMNS)
    if tw:
        tw.writerow(TRAJECTORY_COLUMNS)

    lr = cfg.optim.lr
    best, bad_epochs, decays, step = math.inf, 0, 0, 0
    violations, min_margin = 0, math.inf
    status = "completed"
    wall = 0.0
    try:
        save_checkpoint(ckpt_path, model.store, model.meta())
        if tw and 0 in cfg.eval.probe_epochs:
            save_checkpoint(out / "ckpt_epoch0.bin", model.store, model.meta())
            tw.writerows([[r[0], r[1], _fmt(r[2]), _fmt(r[3])] for r in _probe_rows(model, probe, cfg, 0)])
            tf.flush()
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            batches = list(batchify(train, cfg.batch_size, cfg.bucket, cfg.seeds.data + epoch, True, uses_bn))
            weight = 0.0
            for i, batch in enumerate(batches):
                weight = kl_weight(cfg.schedule, epoch, i, len(batches))
                # the floor bounds KL against N(0, I), so only the unconditional model is checked
                floor = model.kl_floor() if isinstance(model, VAEModel) else None
                tape = Tape()
                p = model.store.bind(tape)
                noise = noise_src.normal((batch.size, n_latent))
                total, parts = _loss(model, p, batch, weight, noise)
                grads = tape.backward(total)
                sgd_update(model.store, {k: grads[t] for k, t in p.items() if t.tape is not None},
                           lr, cfg.optim.clip)
                step += 1
                kl_raw = math.nan if parts is None else float(parts.kl_raw.data)
                recon = float(total.data) if parts is None else float(parts.recon.data)
                if floor is not None:
                    margin = kl_raw - (floor - FLOOR_SLACK_PER_DIM * n_latent)
                    min_margin = min(min_margin, margin)
                    if margin < 0:
                        violations += 1
                        if violations == 1:
                            log.warning("KL floor violated at step %d: %.6f < %.6f", step, kl_raw, floor)
                        if cfg.strict_floor:
                            raise AssertionError(f"KL floor violated at step {step}: {kl_raw} < {floor}")
                bw.writerow([epoch + 1, step, _fmt(recon), _fmt(kl_raw), _fmt(weight), _fmt(floor)])
            wall += time.perf_counter() - t0
            final = epoch + 1 == cfg.max_epochs
            row = evaluate(model, valid, cfg, RandomSource(cfg.seeds.noise, stream=1000 + epoch), with_iw=final)
            elbo = row["recon"] + (0.0 if math.isnan(row["kl_raw"]) else row["kl_raw"])
            if not math.isfinite(elbo):
                raise NonFiniteError(f"non-finite validation loss at epoch {epoch + 1}")
            save_checkpoint(ckpt_path, model.store, model.meta())
            if tw and (epoch + 1) in cfg.eval.probe_epochs:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1}.bin", model.store, model.meta())
                tw.writerows([[r[0], r[1], _fmt(r[2]), _fmt(r[3])] for r in _probe_rows(model, probe, cfg, epoch + 1)])
                tf.flush()
            mw.writerow([
                epoch + 1, step, _fmt(row["recon"]), _fmt(row["kl_raw"]), _fmt(weight),
                _fmt(row["kl_regularized"]), _fmt(row["anchor_kl"]), _fmt(row.get("mi")),
                _fmt(row.get("mi_se")), _fmt(row.get("agg_kl")), _fmt(row.get("au")),
                _fmt(row.get("iw_nll")), _fmt(lr), _fmt(wall if cfg.wall_clock else None),
            ])
            if dw:
                d = row["decomposition"]
                dw.writerow([epoch + 1] + [_fmt(v) for v in (d.mean_kl, d.mi, d.mi_se, d.agg_kl, d.agg_kl_se)])
                df.flush()
            mf.flush()
            bf.flush()
            log.info("epoch %d recon %.3f kl %.3f lr %.4g", epoch + 1, row["recon"], row["kl_raw"], lr)
            if elbo < best - 1e-9:
                best, bad_epochs = elbo, 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.optim.patience:
                    decays += 1
                    bad_epochs = 0
                    if decays >= cfg.optim.max_decays:
                        status = "converged"
                        break
                    lr *= cfg.optim.decay_factor
    except (NonFiniteError, DomainError) as exc:
        status = "aborted"
        raise NumericAbort(str(exc)) from exc
    finally:
        for fh in (mf, bf, tf, df):
            if fh is not None:
                fh.close()
        extra = {
            "status": status, "steps": step, "kl_floor_violations": violations,
            "kl_floor_min_margin": None if math.isinf(min_margin) else min_margin,
            "lr_decays": decays,
        }
        if cfg.wall_clock:
            extra["train_seconds"] = wall
        (out / "run_state.json").write_text(json.dumps(extra, indent=2, sort_keys=True) + "\n")
    arts.summary = emit_reports(out)
    return arts


# -- evaluation and probing of checkpoints -----------------------------------------------


def load_model(path):
    store, meta = load_checkpoint(path)
    model = build_model(meta)
    if set(store.names()) != set(model.store.names()):
        raise ValueError(f"{path}: parameter names do not match the {meta['task']} model")
    for name in store:
        if store[name].shape != model.store[name].shape:
            raise ValueError(f"{path}: {name} has shape {store[name].shape}, model expects {model.store[name].shape}")
        model.store[name] = store[name]
    return model


def eval_run(checkpoint, dataset: Dataset, which=("recon", "kl", "mi", "au", "iw_nll"), k: int = 500,
             seed: int = 0, eval_size: int = 500, mi_samples: int = 1, iw_size: int | None = None) -> MetricsReport:
    """Evaluate a checkpoint with eval-mode batch norm."""
    model = load_model(checkpoint)
    source = RandomSource(seed, stream=2000)
    report = MetricsReport()
    cfg = TrainConfig()
    cfg.eval.eval_size, cfg.eval.mi_samples = eval_size, mi_samples
    cfg.eval.iw_samples = k
    cfg.eval.iw_size = (len(dataset) if iw_size is None else iw_size) if "iw_nll" in which else 0
    row = evaluate(model, dataset, cfg, source, with_iw="iw_nll" in which)
    report.recon = row["recon"]
    report.kl = row["kl_raw"]
    if "mi" in which:
        report.mi, report.mi_se, report.agg_kl = row.get("mi", math.nan), row.get("mi_se", math.nan), row.get("agg_kl", math.nan)
    if "au" in which:
        report.au = row.get("au")
    report.iw_nll = row.get("iw_nll", math.nan)
    return report


def probe_run(checkpoints: dict[int, str], probe: Dataset, out_csv, grid: np.ndarray | None = None) -> Path:
    """Trajectory rows for each ``epoch -> checkpoint`` into ``out_csv``."""
    grid = np.linspace(-4.0, 4.0, 321) if grid is None else grid
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for epoch in sorted(checkpoints):
            model = load_model(checkpoints[epoch])
            for i, a, b in trajectory_probe(model, probe, grid):
                w.writerow([epoch, i, _fmt(a), _fmt(b)])
    return out_csv


# -- reports ------------------------------------------------------------------------------------


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_reports(run_dir) -> dict:
    """Consolidate a run directory into ``summary.json`` and return it."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"{metrics_path} missing")
    rows = read_csv(metrics_path)
    state = json.loads((run_dir / "run_state.json").read_text()) if (run_dir / "run_state.json").exists() else {}
    cfg = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    floor_rows = read_csv(run_dir / "train_batches.csv") if (run_dir / "train_batches.csv").exists() else []
    n = cfg.get("model", {}).get("latent", 0)
    checked = [r for r in floor_rows if r["kl_floor"]]
    bad = [r for r in checked if float(r["kl_raw"]) < float(r["kl_floor"]) - FLOOR_SLACK_PER_DIM * n]
    summary = {
        "final": rows[-1] if rows else {},
        "epochs": len(rows),
        "status": state.get("status", "unknown"),
        "kl_floor": {
            "checked_batches": len(checked),
            "violations": len(bad),
            "verdict": "n/a" if not checked else ("pass" if not bad else "fail"),
        },
    }
    if "train_seconds" in state:
        summary["train_seconds"] = state["train_seconds"]
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- gradient check of the full objective -------------------------------------------------------


def loss_gradcheck(task: str = "vae", regularizer: str = "fixed_bn", seed: int = 0, cell: str = "lstm",
                   batch_size: int = 4, kl_weight_value: float = 0.7, h: float = 1e-5, anchor: bool = True,
                   embed: int = 4, hidden: int = 5, latent: int = 3,
                   **reg_kwargs):
    """Central-difference check of the whole training loss on a tiny random model with frozen noise."""
    from .autodiff import gradient_check
    from .latent import RegularizerConfig

    rng = RandomSource(seed, stream=505)
    spec = SyntheticSpec(components=2, vocab_size=10, min_len=2, max_len=5, size=batch_size, seed=seed)
    data = gen_synth_pairs(spec, "distinct") if task == "cvae" else gen_synth_lm(spec)
    batch = make_batch(data, np.arange(batch_size))
    mc = ModelConfig(spec.vocab_size, embed=embed, hidden=hidden, latent=latent, cell=cell, init_range=0.5)
    reg = RegularizerConfig(kind=regularizer, **reg_kwargs)
    if task == "lm":
        model = LMModel(mc, seed)
    elif task == "cvae":
        model = CVAEModel(mc, reg, seed, anchor=anchor)
    else:
        model = VAEModel(mc, reg, seed)
    store = model.store
    if "bn.beta" in store:
        store["bn.beta"] = rng.normal(store["bn.beta"].shape) * 0.5
    consts = store.constants()
    params = {k: store[k] for k in store if store.trainable(k)}
    noise = rng.normal((batch_size, mc.latent))

    def fn(leaves):
        total, _ = _loss(model, {**consts, **leaves}, batch, kl_weight_value, noise, train=True, update=False)
        return total

    return gradient_check(fn, params, h=h)
