"""Vocabulary, synthetic Markov-mixture corpora, corpus loading and batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import RandomSource

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


class Vocab:
    """Token <-> id map with ids 0..3 reserved for pad, unk, begin, end."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [BOS] + [self.stoi.get(w, UNK) for w in words] + [EOS]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], max_vocab: int) -> "Vocab":
        if max_vocab < len(RESERVED):
            raise ValueError(f"max_vocab must be >= {len(RESERVED)}")
        counts = Counter(w for s in sentences for w in s)
        for r in RESERVED:
            counts.pop(r, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[: max_vocab - len(RESERVED)]])

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls([ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln])


@dataclass
class Dataset:
    """Token-id sequences (each wrapped in begin/end), optional labels and paired targets."""

    seqs: list[np.ndarray]
    labels: np.ndarray | None = None
    targets: list[np.ndarray] | None = None
    vocab_size: int = 0

    def __len__(self) -> int:
        return len(self.seqs)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(
            [self.seqs[i] for i in idx],
            None if self.labels is None else self.labels[idx],
            None if self.targets is None else [self.targets[i] for i in idx],
            self.vocab_size,
        )


# -- synthetic data ------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Mixture of ``components`` first-order Markov chains over the content tokens.

    ``concentration`` is the Dirichlet parameter for each row; small values
    give sparse, easily distinguished chains.
    """

    components: int = 4
    vocab_size: int = 32
    min_len: int = 5
    max_len: int = 15
    size: int = 10_000
    seed: int = 0
    concentration: float = 0.1
    initial: np.ndarray = field(default=None, repr=False)  # (C, K)
    transitions: np.ndarray = field(default=None, repr=False)  # (C, K, K)

    def __post_init__(self):
        if self.components < 1:
            raise ValueError("need at least one component")
        if self.vocab_size <= len(RESERVED) + 1:
            raise ValueError("vocab_size must leave at least two content tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.transitions is None:
            self.initial, self.transitions = random_chains(
                self.components, self.content_size, self.concentration, RandomSource(self.seed, stream=101)
            )
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        k = self.content_size
        if self.transitions.shape != (self.components, k, k) or self.initial.shape != (self.components, k):
            raise ValueError("chain arrays do not match components x content tokens")
        if not np.allclose(self.transitions.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")

    @property
    def content_size(self) -> int:
        return self.vocab_size - len(RESERVED)


def random_chains(components: int, k: int, concentration: float, rng: RandomSource):
    gen = rng.generator
    initial = gen.dirichlet(np.full(k, concentration), size=components)
    trans = gen.dirichlet(np.full(k, concentration), size=(components, k))
    # renormalise so rows sum to one to machine precision
    trans /= trans.sum(-1, keepdims=True)
    initial /= initial.sum(-1, keepdims=True)
    return initial, trans


def _roll_chain(initial, trans, length, gen: np.random.Generator) -> np.ndarray:
    k = initial.shape[0]
    out = np.empty(length, dtype=np.int64)
    cum_init = np.cumsum(initial)
    cum = np.cumsum(trans, axis=-1)
    u = gen.random(length)
    s = min(int(np.searchsorted(cum_init, u[0] * cum_init[-1], side="right")), k - 1)
    out[0] = s
    for t in range(1, length):
        s = min(int(np.searchsorted(cum[s], u[t] * cum[s, -1], side="right")), k - 1)
        out[t] = s
    return out


def _wrap(content: np.ndarray) -> np.ndarray:
    return np.concatenate([[BOS], content + len(RESERVED), [EOS]]).astype(np.int64)


def gen_synth_lm(spec: SyntheticSpec, size: int | None = None, seed: int | None = None) -> Dataset:
    """Sample a component uniformly, then roll its chain for a uniform length."""
    size = spec.size if size is None else size
    gen = RandomSource(spec.seed if seed is None else seed, stream=202).generator
    comps = gen.integers(0, spec.components, size)
    lengths = gen.integers(spec.min_len, spec.max_len + 1, size)
    seqs = [_wrap(_roll_chain(spec.initial[c], spec.transitions[c], n, gen)) for c, n in zip(comps, lengths)]
    return Dataset(seqs, comps.astype(np.int64), None, spec.vocab_size)


def gen_synth_pairs(
    spec: SyntheticSpec, response_rule: str = "distinct", size: int | None = None, seed: int | None = None
) -> Dataset:
    """Paired ``(x, y)`` data sharing one component.

    ``response_rule="identity"`` reuses the x chains for y; ``"distinct"``
    draws a separate response chain per component.
    """
    if response_rule == "identity":
        r_init, r_trans = spec.initial, spec.transitions
    elif response_rule == "distinct":
        r_init, r_trans = random_chains(
            spec.components, spec.content_size, spec.concentration, RandomSource(spec.seed, stream=103)
        )
    else:
        raise ValueError(f"unknown response rule {response_rule!r}")
    size = spec.size if size is None else size
    gen = RandomSource(spec.seed if seed is None else seed, stream=203).generator
    comps = gen.integers(0, spec.components, size)
    xs, ys = [], []
    for c in comps:
        nx, ny = gen.integers(spec.min_len, spec.max_len + 1, 2)
        xs.append(_wrap(_roll_chain(spec.initial[c], spec.transitions[c], nx, gen)))
        ys.append(_wrap(_roll_chain(r_init[c], r_trans[c], ny, gen)))
    return Dataset(xs, comps.astype(np.int64), ys, spec.vocab_size)


def synthetic_vocab(spec: SyntheticSpec) -> Vocab:
    return Vocab([f"w{i}" for i in range(spec.content_size)])


def export_corpus(dataset: Dataset, vocab: Vocab, path, label_path=None, target_path=None) -> None:
    """Write one whitespace-tokenized line per sequence, plus optional label/target files."""
    Path(path).write_text("".join(" ".join(vocab.decode(s)) + "\n" for s in dataset.seqs), encoding="utf-8")
    if label_path is not None and dataset.labels is not None:
        Path(label_path).write_text("".join(f"{int(c)}\n" for c in dataset.labels), encoding="utf-8")
    if target_path is not None and dataset.targets is not None:
        Path(target_path).write_text(
            "".join(" ".join(vocab.decode(s)) + "\n" for s in dataset.targets), encoding="utf-8"
        )


# -- corpus loading ----------------------------------------------------------------------


def read_lines(path) -> list[list[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    return [ln.split() for ln in text.splitlines() if ln.strip()]


def load_corpus(path, vocab: Vocab | None = None, max_vocab: int = 10_000, label_path=None) -> tuple[Dataset, Vocab]:
    sentences = read_lines(path)
    if not sentences:
        raise ValueError(f"empty corpus: {path}")
    if vocab is None:
        vocab = Vocab.build(sentences, max_vocab)
    seqs = [np.array(vocab.encode(s), dtype=np.int64) for s in sentences]
    labels = None
    if label_path is not None:
        labels = np.array([int(x) for x in Path(label_path).read_text().split()], dtype=np.int64)
        if len(labels) != len(seqs):
            raise ValueError(f"{label_path}: {len(labels)} labels for {len(seqs)} sentences")
    return Dataset(seqs, labels, None, len(vocab)), vocab


def load_pairs(src_path, tgt_path, vocab: Vocab | None = None, max_vocab: int = 10_000) -> tuple[Dataset, Vocab]:
    xs, ys = read_lines(src_path), read_lines(tgt_path)
    if not xs or len(xs) != len(ys):
        raise ValueError("paired corpus must be nonempty with equal line counts")
    if vocab is None:
        vocab = Vocab.build(xs + ys, max_vocab)
    enc = [np.array(vocab.encode(s), dtype=np.int64) for s in xs]
    dec = [np.array(vocab.encode(s), dtype=np.int64) for s in ys]
    return Dataset(enc, None, dec, len(vocab)), vocab


# -- batching --------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) int64, PAD beyond length
    lengths: np.ndarray
    mask: np.ndarray  # (B, T) float64
    labels: np.ndarray | None = None
    y_tokens: np.ndarray | None = None
    y_lengths: np.ndarray | None = None
    y_mask: np.ndarray | None = None
    index: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)
    return tokens, lengths, mask


def make_batch(dataset: Dataset, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    tokens, lengths, mask = pad([dataset.seqs[i] for i in idx])
    batch = Batch(tokens, lengths, mask, index=idx)
    if dataset.labels is not None:
        batch.labels = dataset.labels[idx]
    if dataset.targets is not None:
        batch.y_tokens, batch.y_lengths, batch.y_mask = pad([dataset.targets[i] for i in idx])
    return batch


def batchify(
    dataset: Dataset,
    batch_size: int,
    bucket: bool = True,
    seed: int | None = 0,
    train: bool = True,
    uses_bn: bool = False,
) -> Iterator[Batch]:
    """Yield batches for one epoch.

    With ``bucket`` the shuffled order is sorted by length inside windows of
    ``50 * batch_size`` so each batch pads only to its own longest row. The
    final short batch is dropped only for train-mode batch norm.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if uses_bn and batch_size < 2:
        raise ValueError("batch norm needs batch size >= 2")
    n = len(dataset)
    order = np.arange(n) if seed is None else RandomSource(seed, stream=303).permutation(n)
    if bucket:
        window = 50 * batch_size
        lengths = np.array([len(s) for s in dataset.seqs])
        chunks = []
        for start in range(0, n, window):
            part = order[start:start + window]
            chunks.append(part[np.argsort(lengths[part], kind="stable")])
        order = np.concatenate(chunks) if chunks else order
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if train and uses_bn and batches and len(batches[-1]) < batch_size:
        batches.pop()
    if bucket and seed is not None and len(batches) > 1:
        perm = RandomSource(seed, stream=304).permutation(len(batches))
        batches = [batches[i] for i in perm]
    for idx in batches:
        yield make_batch(dataset, idx)
