"""Layers, recurrent cells, plain SGD and checkpoint I/O on top of the tape."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import RandomSource, ShapeError, Tape, Tensor

CHECKPOINT_VERSION = 1
_MAGIC = "BNVAE-CKPT"


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class ParamStore:
    """Named float64 arrays with a stable order and per-entry trainable flag.

    ``kind`` is one of ``weight`` (random init), ``bias`` (zero init) or
    ``buffer`` (owned by a layer, e.g. frozen BN scale or running stats).
    """

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._kind: dict[str, str] = {}

    def add(self, name: str, value, trainable: bool = True, kind: str = "weight") -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = bool(trainable)
        self._kind[name] = kind
        return self._values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {arr.shape} != stored {self._values[name].shape}")
        self._values[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def kind(self, name: str) -> str:
        return self._kind[name]

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every trainable array as a leaf on ``tape``."""
        return {
            k: tape.leaf(v) if self._trainable[k] else Tensor(v) for k, v in self._values.items()
        }

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._values.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v.copy(), self._trainable[k], self._kind[k])
        return out

    def num_values(self) -> int:
        return int(np.sum([v.size for v in self._values.values()]))


def init_params(store: ParamStore, scheme: str = "uniform", r: float = 0.1, seed: int = 0) -> ParamStore:
    """Uniform(-r, r) for weights, zeros for biases; buffers untouched."""
    if scheme != "uniform":
        raise ValueError(f"unsupported init scheme {scheme!r}")
    rng = RandomSource(seed, stream=0)
    for name in store:
        kind = store.kind(name)
        if kind == "weight":
            store[name] = rng.uniform(-r, r, store[name].shape) if r > 0 else np.zeros(store[name].shape)
        elif kind == "bias":
            store[name] = np.zeros(store[name].shape)
    return store


# -- layers ---------------------------------------------------------------------


def linear_forward(x, weight, bias) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def add_linear(store: ParamStore, prefix: str, n_in: int, n_out: int) -> None:
    store.add(f"{prefix}.W", np.zeros((n_in, n_out)))
    store.add(f"{prefix}.b", np.zeros(n_out), kind="bias")


def linear(p: dict[str, Tensor], prefix: str, x) -> Tensor:
    return linear_forward(x, p[f"{prefix}.W"], p[f"{prefix}.b"])


def embedding_lookup(table, ids) -> Tensor:
    return ad.gather_rows(table, ids)


@dataclass(frozen=True)
class RecurrentCellConfig:
    kind: str  # "lstm" | "gru"
    input_size: int
    hidden_size: int

    def __post_init__(self):
        if self.kind not in ("lstm", "gru"):
            raise ValueError(f"cell kind must be lstm or gru, got {self.kind!r}")
        if self.hidden_size < 1 or self.input_size < 1:
            raise ValueError("cell sizes must be >= 1")


def add_cell(store: ParamStore, prefix: str, cfg: RecurrentCellConfig) -> None:
    n_in, h = cfg.input_size + cfg.hidden_size, cfg.hidden_size
    if cfg.kind == "lstm":
        store.add(f"{prefix}.W", np.zeros((n_in, 4 * h)))
        store.add(f"{prefix}.b", np.zeros(4 * h), kind="bias")
    else:
        store.add(f"{prefix}.Wg", np.zeros((n_in, 2 * h)))
        store.add(f"{prefix}.bg", np.zeros(2 * h), kind="bias")
        store.add(f"{prefix}.Wn", np.zeros((n_in, h)))
        store.add(f"{prefix}.bn", np.zeros(h), kind="bias")


def zero_state(cfg: RecurrentCellConfig, batch: int) -> tuple[Tensor, ...]:
    z = Tensor(np.zeros((batch, cfg.hidden_size)))
    return (z, Tensor(np.zeros((batch, cfg.hidden_size)))) if cfg.kind == "lstm" else (z,)


def rnn_step(cfg: RecurrentCellConfig, p: dict[str, Tensor], prefix: str, x, state) -> tuple[Tensor, ...]:
    """One LSTM (gates i, f, g, o) or GRU step. Returns the new state tuple."""
    h = cfg.hidden_size
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_size:
        raise ShapeError(f"{prefix}: input shape {x.shape} != (batch, {cfg.input_size})")
    if state[0].shape != (x.shape[0], h):
        raise ShapeError(f"{prefix}: state shape {state[0].shape} != {(x.shape[0], h)}")
    if cfg.kind == "lstm":
        h_prev, c_prev = state
        a = linear_forward(ad.concat([x, h_prev], axis=1), p[f"{prefix}.W"], p[f"{prefix}.b"])
        i = ad.sigmoid(a[:, :h])
        f = ad.sigmoid(a[:, h:2 * h])
        g = ad.tanh(a[:, 2 * h:3 * h])
        o = ad.sigmoid(a[:, 3 * h:])
        c = f * c_prev + i * g
        return (o * ad.tanh(c), c)
    (h_prev,) = state
    gates = ad.sigmoid(linear_forward(ad.concat([x, h_prev], axis=1), p[f"{prefix}.Wg"], p[f"{prefix}.bg"]))
    r, u = gates[:, :h], gates[:, h:]
    cand = ad.tanh(linear_forward(ad.concat([x, r * h_prev], axis=1), p[f"{prefix}.Wn"], p[f"{prefix}.bn"]))
    return (h_prev + u * (cand - h_prev),)


def run_rnn(
    cfg: RecurrentCellConfig,
    p: dict[str, Tensor],
    prefix: str,
    table: Tensor,
    tokens: np.ndarray,
    mask: np.ndarray,
    state=None,
    reverse: bool = False,
) -> tuple[list[Tensor], tuple[Tensor, ...]]:
    """Unroll over ``tokens`` (batch x T); masked steps carry the state through.

    Returns per-step hidden outputs and the final state (at each row's length).
    """
    batch, steps = tokens.shape
    if state is None:
        state = zero_state(cfg, batch)
    outs: list[Tensor] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x = embedding_lookup(table, tokens[:, t])
        new = rnn_step(cfg, p, prefix, x, state)
        m = mask[:, t]
        if not m.all():
            keep = Tensor(np.repeat(m[:, None], cfg.hidden_size, axis=1))
            new = tuple(s + keep * (n - s) for n, s in zip(new, state))
        state = new
        outs[t] = state[0]
    return outs, state


def softmax_xent(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> tuple[Tensor, int]:
    """Summed token NLL under a max-shifted log-softmax, and the token count."""
    logits = ad.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"softmax_xent: {n} logit rows vs {targets.shape[0]} targets")
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    count = int(np.count_nonzero(w))
    if count == 0:
        raise ValueError("softmax_xent: every position is masked")
    if np.any((targets < 0) | (targets >= v)):
        raise IndexError("softmax_xent: target id out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = (lse - z[rows, targets]) * w

    def backward(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (w * g)[:, None],)

    return ad._result(np.asarray(nll.sum()), (logits,), backward), count


def token_log_probs(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Untaped per-row log p(target); used by evaluators."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return np.take_along_axis(z, targets[..., None], axis=-1)[..., 0] - lse


# -- optimisation ---------------------------------------------------------------------


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.vdot(g, g) for g in grads.values()])))


def sgd_update(store: ParamStore, grads: dict[str, np.ndarray], lr: float, clip_norm: float | None = None) -> float:
    """Clip by global norm, then ``p -= lr * g`` on trainable entries.

    Returns the pre-clip norm.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    grads = {k: g for k, g in grads.items() if store.trainable(k)}
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient in {bad}")
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    for k, g in grads.items():
        store[k] = store[k] - (lr * factor) * g
    return norm


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Write a one-line JSON header followed by little-endian float64 payloads."""
    table, offset = [], 0
    for name in store:
        arr = store[name]
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "trainable": store.trainable(name),
                "kind": store.kind(name),
            }
        )
        offset += arr.size * 8
    header = {"format": _MAGIC, "version": CHECKPOINT_VERSION, "params": table, "meta": meta or {}}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in store:
            fh.write(np.ascontiguousarray(store[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != _MAGIC or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    store = ParamStore()
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(entry["shape"])
        store.add(entry["name"], arr.astype(np.float64), entry["trainable"], entry["kind"])
    return store, header["meta"]
