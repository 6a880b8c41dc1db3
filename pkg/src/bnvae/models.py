"""Sequence VAE, conditional VAE and the plain LSTM language model.

Every forward takes ``p``, a name -> Tensor mapping. Pass ``store.bind(tape)``
to record gradients or ``store.constants()`` for a tape-free evaluation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RandomSource, Tensor
from .data import BOS, EOS, Batch
from .latent import (
    DeltaConfig,
    DiagGaussian,
    ExtendedBNState,
    FixedBNState,
    FreeBitsConfig,
    RegularizerConfig,
    clamp_logvar,
    delta_constrain,
    extended_bn_apply,
    fixed_bn_apply,
    free_bits_hinge,
    kl_diag_pair,
    kl_lower_bound,
    kl_standard_normal,
    reparameterize,
    sigma_to_gaussian,
)
from .nn import (
    NonFiniteError,
    ParamStore,
    RecurrentCellConfig,
    add_cell,
    add_linear,
    embedding_lookup,
    init_params,
    linear,
    rnn_step,
    run_rnn,
    softmax_xent,
    token_log_probs,
)


@dataclass
class ModelConfig:
    vocab_size: int
    embed: int = 16
    hidden: int = 32
    latent: int = 8
    cell: str = "lstm"
    init_range: float = 0.1


@dataclass
class LossBreakdown:
    recon: Tensor  # nats per sequence
    kl_raw: Tensor  # batch-mean KL(q || prior)
    kl_regularized: Tensor  # what the objective actually weights
    total: Tensor
    anchor_kl: Tensor | None = None
    kl_per_dim: np.ndarray | None = None
    posterior: DiagGaussian | None = None
    tokens: int = 0

    def values(self) -> dict[str, float]:
        return {
            "recon": float(self.recon.data),
            "kl_raw": float(self.kl_raw.data),
            "kl_regularized": float(self.kl_regularized.data),
            "anchor_kl": math.nan if self.anchor_kl is None else float(self.anchor_kl.data),
            "total": float(self.total.data),
        }


def _check_finite(loss: LossBreakdown) -> None:
    if not np.isfinite(loss.total.data):
        raise NonFiniteError(f"non-finite loss: {loss.values()}")


class _Decoder:
    """Shared teacher-forced decoder: embedding, one recurrent cell, output head."""

    cfg: ModelConfig
    cell_dec: RecurrentCellConfig

    def _add_decoder(self, store: ParamStore) -> None:
        c = self.cfg
        store.add("embed", np.zeros((c.vocab_size, c.embed)))
        add_cell(store, "dec", self.cell_dec)
        add_linear(store, "out", c.hidden, c.vocab_size)

    def initial_state(self, s: Tensor | None, batch: int) -> tuple[Tensor, ...]:
        h = self.cfg.hidden
        if s is None:
            zeros = Tensor(np.zeros((batch, h)))
            return (zeros, zeros) if self.cfg.cell == "lstm" else (zeros,)
        h0 = ad.tanh(s)
        return (h0, s) if self.cfg.cell == "lstm" else (h0,)

    def decoder_outputs(self, p, tokens: np.ndarray, state) -> list[Tensor]:
        """Hidden states while reading ``tokens[:, :-1]`` (no state masking needed)."""
        ones = np.ones((tokens.shape[0], tokens.shape[1] - 1))
        outs, _ = run_rnn(self.cell_dec, p, "dec", p["embed"], tokens[:, :-1], ones, state)
        return outs

    def reconstruction(self, p, tokens: np.ndarray, mask: np.ndarray, state) -> tuple[Tensor, int]:
        """Summed next-token NLL over unmasked targets."""
        outs = self.decoder_outputs(p, tokens, state)
        hs = ad.reshape(ad.stack(outs, axis=0), (-1, self.cfg.hidden))
        logits = linear(p, "out", hs)
        targets = tokens[:, 1:].T.reshape(-1)
        return softmax_xent(logits, targets, mask[:, 1:].T.reshape(-1))

    def sequence_log_likelihood(self, p, tokens: np.ndarray, mask: np.ndarray, state) -> np.ndarray:
        """Untaped per-row log p(tokens[1:] | state)."""
        outs = self.decoder_outputs(p, tokens, state)
        hs = np.stack([o.data for o in outs], axis=1)  # (B, T-1, H)
        logits = hs @ p["out.W"].data + p["out.b"].data
        lp = token_log_probs(logits, tokens[:, 1:])
        return (lp * mask[:, 1:]).sum(axis=1)

    def greedy_or_sample(self, p, state, batch: int, mode: str, max_len: int, source: RandomSource | None):
        if mode not in ("greedy", "sample"):
            raise ValueError(f"mode must be greedy or sample, got {mode!r}")
        if mode == "sample" and source is None:
            raise ValueError("sample mode needs a RandomSource")
        tok = np.full(batch, BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        out = [[] for _ in range(batch)]
        for _ in range(max_len):
            x = embedding_lookup(p["embed"], tok)
            state = rnn_step(self.cell_dec, p, "dec", x, state)
            logits = state[0].data @ p["out.W"].data + p["out.b"].data
            if mode == "greedy":
                tok = logits.argmax(axis=1)
            else:
                z = logits - logits.max(axis=1, keepdims=True)
                prob = np.exp(z)
                prob /= prob.sum(axis=1, keepdims=True)
                u = source.uniform(0.0, 1.0, batch)
                tok = np.minimum((prob.cumsum(axis=1) < u[:, None]).sum(axis=1), prob.shape[1] - 1)
            for i in range(batch):
                if not done[i]:
                    if tok[i] == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(tok[i]))
            if done.all():
                break
        return out


class LMModel(_Decoder):
    """Autoregressive LSTM/GRU language model with no latent variable."""

    task = "lm"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.cell_dec = RecurrentCellConfig(cfg.cell, cfg.embed, cfg.hidden)
        self.store = ParamStore()
        self._add_decoder(self.store)
        init_params(self.store, r=cfg.init_range, seed=seed)

    def meta(self) -> dict:
        return {"task": self.task, "model": asdict(self.cfg)}


def lm_loss(model: LMModel, p, batch: Batch) -> Tensor:
    """Negative log-likelihood in nats per sequence."""
    nll, _ = model.reconstruction(p, batch.tokens, batch.mask, model.initial_state(None, batch.size))
    return ad.scale(nll, 1.0 / batch.size)


class _Regularized:
    """Builds the post-regularizer posterior from the raw heads."""

    reg: RegularizerConfig
    store: ParamStore
    n: int

    def _add_regularizer(self, store: ParamStore, n: int) -> None:
        r = self.reg
        if r.kind == "fixed_bn":
            store.add("bn.gamma", np.array(r.gamma), trainable=False, kind="buffer")
            store.add("bn.beta", np.zeros(n), kind="bias")
            store.add("bn.running_mean", np.zeros(n), trainable=False, kind="buffer")
            store.add("bn.running_var", np.ones(n), trainable=False, kind="buffer")
        elif r.kind == "extended_bn":
            store.add("ebn.theta", np.array(0.0), kind="bias")
            for b in ("mu", "sigma"):
                store.add(f"ebn.running_mean_{b}", np.zeros(n), trainable=False, kind="buffer")
                store.add(f"ebn.running_var_{b}", np.ones(n), trainable=False, kind="buffer")
        self.delta_cfg = DeltaConfig(r.delta) if r.kind == "delta" else None
        self.fb_cfg = FreeBitsConfig(r.free_bits, r.free_bits_mode) if r.kind == "free_bits" else None

    @property
    def uses_bn(self) -> bool:
        return self.reg.kind in ("fixed_bn", "extended_bn")

    def kl_floor(self) -> float | None:
        if self.reg.kind != "fixed_bn":
            return None
        return kl_lower_bound(self.n, float(self.store["bn.gamma"]), self.store["bn.beta"])

    def regularize(self, p, raw_mu: Tensor, raw_lv: Tensor, train: bool, update: bool) -> DiagGaussian:
        kind, s = self.reg.kind, self.store
        mode = "train" if train else "eval"
        if kind == "fixed_bn":
            state = FixedBNState(
                float(s["bn.gamma"]), s["bn.beta"], self.reg.eps, self.reg.momentum,
                s["bn.running_mean"], s["bn.running_var"], mode,
            )
            mu = fixed_bn_apply(raw_mu, state, beta=p["bn.beta"], update=update and train)
            if update and train:
                s["bn.running_mean"], s["bn.running_var"] = state.running_mean, state.running_var
            return DiagGaussian(mu, clamp_logvar(raw_lv))
        if kind == "extended_bn":
            state = ExtendedBNState(
                self.reg.tau, float(s["ebn.theta"]), self.reg.eps, self.reg.momentum,
                s["ebn.running_mean_mu"], s["ebn.running_var_mu"],
                s["ebn.running_mean_sigma"], s["ebn.running_var_sigma"], mode, self.n,
            )
            mu, sigma = extended_bn_apply(raw_mu, raw_lv, state, theta=p["ebn.theta"], update=update and train)
            if update and train:
                for b in ("mu", "sigma"):
                    s[f"ebn.running_mean_{b}"] = getattr(state, f"running_mean_{b}")
                    s[f"ebn.running_var_{b}"] = getattr(state, f"running_var_{b}")
            return sigma_to_gaussian(mu, sigma)
        if kind == "delta":
            return delta_constrain(raw_mu, raw_lv, self.delta_cfg)
        return DiagGaussian(raw_mu, clamp_logvar(raw_lv))

    def regularized_kl(self, kl_per_dim_batch_mean: Tensor, kl_raw: Tensor) -> Tensor:
        if self.fb_cfg is not None:
            return free_bits_hinge(kl_per_dim_batch_mean, self.fb_cfg)
        return kl_raw


class VAEModel(_Decoder, _Regularized):
    """Encoder cell -> (f_mu, f_Sigma) heads -> regularizer -> z -> decoder initial state."""

    task = "vae"

    def __init__(self, cfg: ModelConfig, reg: RegularizerConfig | None = None, seed: int = 0):
        self.cfg = cfg
        self.reg = reg or RegularizerConfig()
        self.n = cfg.latent
        self.cell_enc = RecurrentCellConfig(cfg.cell, cfg.embed, cfg.hidden)
        self.cell_dec = RecurrentCellConfig(cfg.cell, cfg.embed, cfg.hidden)
        s = self.store = ParamStore()
        self._add_decoder(s)
        add_cell(s, "enc", self.cell_enc)
        add_linear(s, "mu", cfg.hidden, cfg.latent)
        add_linear(s, "logvar", cfg.hidden, cfg.latent)
        add_linear(s, "z2s", cfg.latent, cfg.hidden)
        self._add_regularizer(s, cfg.latent)
        init_params(s, r=cfg.init_range, seed=seed)

    def meta(self) -> dict:
        return {"task": self.task, "model": asdict(self.cfg), "regularizer": asdict(self.reg)}

    def raw_heads(self, p, batch: Batch) -> tuple[Tensor, Tensor]:
        if batch.size == 0:
            raise ValueError("empty batch")
        _, state = run_rnn(self.cell_enc, p, "enc", p["embed"], batch.tokens, batch.mask)
        h = state[0]
        return linear(p, "mu", h), linear(p, "logvar", h)

    def decoder_state(self, p, z) -> tuple[Tensor, ...]:
        z = ad.as_tensor(z)
        return self.initial_state(linear(p, "z2s", z), z.shape[0])


def vae_encode(model: VAEModel, p, batch: Batch, train: bool = True, update: bool = True) -> DiagGaussian:
    raw_mu, raw_lv = model.raw_heads(p, batch)
    return model.regularize(p, raw_mu, raw_lv, train, update)


def vae_loss(
    model: VAEModel,
    p,
    batch: Batch,
    kl_weight: float,
    noise,
    train: bool = True,
    update: bool = True,
    z_override=None,
) -> LossBreakdown:
    """Negative ELBO with one reparameterized sample per sequence.

    ``noise`` is a (batch, n) standard-normal array; ``z_override`` feeds a
    fixed latent to the decoder instead of the reparameterized sample.
    """
    q = vae_encode(model, p, batch, train, update)
    z = reparameterize(q, noise) if z_override is None else ad.as_tensor(z_override)
    nll, count = model.reconstruction(p, batch.tokens, batch.mask, model.decoder_state(p, z))
    inv_b = 1.0 / batch.size
    recon = ad.scale(nll, inv_b)
    _, per_dim = kl_standard_normal(q)
    per_dim_mean = ad.mean(per_dim, axis=0)
    kl_raw = ad.sum(per_dim_mean)
    kl_reg = model.regularized_kl(per_dim_mean, kl_raw)
    total = recon + ad.scale(kl_reg, kl_weight) if kl_weight else recon
    out = LossBreakdown(recon, kl_raw, kl_reg, total, None, per_dim_mean.data.copy(), q, count)
    _check_finite(out)
    return out


class CVAEModel(_Decoder, _Regularized):
    """Bidirectional context encoder over x, recognition net over (x, y), prior net over x."""

    task = "cvae"

    def __init__(self, cfg: ModelConfig, reg: RegularizerConfig | None = None, seed: int = 0, anchor: bool = True):
        self.cfg = cfg
        self.reg = reg or RegularizerConfig()
        if self.reg.kind not in ("none", "fixed_bn"):
            raise ValueError("the conditional model supports regularizer none or fixed_bn")
        self.anchor = anchor
        self.n = cfg.latent
        h = cfg.hidden
        self.cell_ctx = RecurrentCellConfig(cfg.cell, cfg.embed, h)
        self.cell_dec = RecurrentCellConfig(cfg.cell, cfg.embed, h)
        s = self.store = ParamStore()
        self._add_decoder(s)
        add_cell(s, "ctx_f", self.cell_ctx)
        add_cell(s, "ctx_b", self.cell_ctx)
        add_cell(s, "yenc", self.cell_ctx)
        add_linear(s, "q_mu", 3 * h, cfg.latent)
        add_linear(s, "q_logvar", 3 * h, cfg.latent)
        add_linear(s, "p_mu", 2 * h, cfg.latent)
        add_linear(s, "p_logvar", 2 * h, cfg.latent)
        add_linear(s, "zc2s", cfg.latent + 2 * h, h)
        self._add_regularizer(s, cfg.latent)
        init_params(s, r=cfg.init_range, seed=seed)

    def meta(self) -> dict:
        return {
            "task": self.task, "model": asdict(self.cfg), "regularizer": asdict(self.reg), "anchor": self.anchor,
        }

    def context(self, p, batch: Batch) -> Tensor:
        _, fwd = run_rnn(self.cell_ctx, p, "ctx_f", p["embed"], batch.tokens, batch.mask)
        _, bwd = run_rnn(self.cell_ctx, p, "ctx_b", p["embed"], batch.tokens, batch.mask, reverse=True)
        return ad.concat([fwd[0], bwd[0]], axis=1)

    def prior(self, p, ctx: Tensor) -> DiagGaussian:
        return DiagGaussian(linear(p, "p_mu", ctx), clamp_logvar(linear(p, "p_logvar", ctx)))

    def recognition(self, p, batch: Batch, ctx: Tensor, train: bool, update: bool) -> DiagGaussian:
        _, ys = run_rnn(self.cell_ctx, p, "yenc", p["embed"], batch.y_tokens, batch.y_mask)
        feats = ad.concat([ctx, ys[0]], axis=1)
        return self.regularize(p, linear(p, "q_mu", feats), linear(p, "q_logvar", feats), train, update)

    def decoder_state(self, p, z, ctx: Tensor) -> tuple[Tensor, ...]:
        z = ad.as_tensor(z)
        return self.initial_state(linear(p, "zc2s", ad.concat([z, ctx], axis=1)), z.shape[0])


def cvae_loss(model: CVAEModel, p, batch: Batch, kl_weight: float, noise, train: bool = True, update: bool = True) -> LossBreakdown:
    """``recon + w * [KL(q || p) + KL(p || N(0, I))]``; the anchor is dropped when ``model.anchor`` is off."""
    if batch.y_tokens is None:
        raise ValueError("conditional loss needs a paired batch")
    ctx = model.context(p, batch)
    prior = model.prior(p, ctx)
    q = model.recognition(p, batch, ctx, train, update)
    z = reparameterize(q, noise)
    nll, count = model.reconstruction(p, batch.y_tokens, batch.y_mask, model.decoder_state(p, z, ctx))
    recon = ad.scale(nll, 1.0 / batch.size)
    kl_qp = ad.mean(kl_diag_pair(q, prior))
    kl_terms = kl_qp
    anchor = None
    if model.anchor:
        anchor = ad.mean(kl_standard_normal(prior)[0])
        kl_terms = kl_qp + anchor
    total = recon + ad.scale(kl_terms, kl_weight) if kl_weight else recon
    out = LossBreakdown(recon, kl_qp, kl_terms, total, anchor, None, q, count)
    _check_finite(out)
    return out


def printed_combined_kl(mu_q, logvar_q, mu_p, logvar_p) -> np.ndarray:
    """A shortened closed form of the combined two-term KL, kept for comparison only.

    It differs from the exact sum ``KL(q||p) + KL(p||N(0,I))`` by a constant ``n / 2``.
    """
    var_q, var_p = np.exp(logvar_q), np.exp(logvar_p)
    term = (var_q + (mu_q - mu_p) ** 2) / var_p + var_p + mu_p**2 - logvar_q - 1.0
    return 0.5 * term.sum(axis=-1)


def generate(model, mode: str = "greedy", max_len: int = 30, source: RandomSource | None = None,
             context: Batch | None = None, count: int = 1) -> list[list[int]]:
    """Decode from a prior sample: N(0, I) for the VAE, p(z|x) for the conditional model."""
    p = model.store.constants()
    if isinstance(model, CVAEModel):
        if context is None:
            raise ValueError("conditional generation needs a context batch")
        ctx = model.context(p, context)
        prior = model.prior(p, ctx)
        eps = source.normal(prior.mu.shape) if source is not None else np.zeros(prior.mu.shape)
        z = reparameterize(prior, eps)
        state = model.decoder_state(p, z, ctx)
        batch = context.size
    elif isinstance(model, VAEModel):
        eps = source.normal((count, model.n)) if source is not None else np.zeros((count, model.n))
        state = model.decoder_state(p, eps)
        batch = count
    else:
        state = model.initial_state(None, count)
        batch = count
    return model.greedy_or_sample(p, state, batch, mode, max_len, source)


def build_model(meta: dict, seed: int = 0):
    """Reconstruct an (initialized) model from checkpoint metadata."""
    cfg = ModelConfig(**meta["model"])
    task = meta["task"]
    if task == "lm":
        return LMModel(cfg, seed)
    reg = RegularizerConfig(**meta.get("regularizer", {}))
    if task == "vae":
        return VAEModel(cfg, reg, seed)
    if task == "cvae":
        return CVAEModel(cfg, reg, seed, anchor=meta.get("anchor", True))
    raise ValueError(f"unknown task {task!r}")
