"""Synthetic tasks and a byte-level corpus loader.

Every sample is a pure function of (spec, split, index). Train and eval splits
are separated by hashing sample contents, so no sequence can land in both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

KINDS = ("assoc_recall", "copy", "char_lm")


@dataclass
class TaskSpec:
    kind: str = "assoc_recall"
    seq_len: int = 64
    vocab: int = 32  # content symbols; special tokens are appended after these
    num_pairs: int = 8
    payload_len: int = 0  # copy task; derived from seq_len when 0
    causal: bool = True
    eval_size: int = 512
    eval_modulus: int = 8  # one hash bucket in this many is held out for eval
    layout: str = "tail"  # assoc_recall pair placement: "tail", "packed" or "spread"
    corpus: str = ""
    context: int = 0  # char_lm eval left context
    eval_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "assoc_recall":
            if self.seq_len < 2 * self.num_pairs + 2:
                raise ValueError("seq_len must be at least 2*num_pairs + 2")
            if self.vocab // 2 < self.num_pairs:
                raise ValueError("vocab too small for unique keys")
            if self.layout not in ("tail", "packed", "spread"):
                raise ValueError(f"unknown layout {self.layout!r}")
        if self.kind == "copy":
            if self.payload_len == 0:
                self.payload_len = (self.seq_len - 1) // 2
            if self.seq_len != 2 * self.payload_len + 1 or self.payload_len < 1:
                raise ValueError("copy task needs seq_len = 2*payload_len + 1")

    @property
    def pad_id(self) -> int:
        return self.vocab

    @property
    def sep_id(self) -> int:
        return self.vocab + 1

    @property
    def model_vocab(self) -> int:
        return self.vocab + 2


@dataclass
class Batch:
    inputs: torch.Tensor  # [B, n] long
    targets: torch.Tensor  # [B, n] long
    mask: torch.Tensor  # [B, n] bool, supervised positions

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(list(keys))


def _bucket(tokens: np.ndarray, modulus: int) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(tokens, dtype=np.int64).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % modulus


def in_eval_split(tokens: np.ndarray, spec: TaskSpec) -> bool:
    return _bucket(tokens, spec.eval_modulus) == 0


def _assoc_sample(spec: TaskSpec, rng: np.random.Generator):
    n, k = spec.seq_len, spec.num_pairs
    half = spec.vocab // 2
    keys = rng.choice(half, size=k, replace=False)
    values = half + rng.integers(0, spec.vocab - half, size=k)
    tokens = np.full(n, spec.pad_id, dtype=np.int64)
    if spec.layout == "packed":
        starts = 2 * np.arange(k)
    elif spec.layout == "tail":
        starts = n - 1 - 2 * k + 2 * np.arange(k)
    else:
        # non-overlapping pair slots in [0, n-1): sorted draws shifted apart
        starts = np.sort(rng.choice(n - 1 - k, size=k, replace=False)) + np.arange(k)
    tokens[starts] = keys
    tokens[starts + 1] = values
    q = rng.integers(0, k)
    tokens[n - 1] = keys[q]
    targets = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    targets[n - 1] = values[q]
    mask[n - 1] = True
    return tokens, targets, mask


def _copy_sample(spec: TaskSpec, rng: np.random.Generator):
    L = spec.payload_len
    payload = rng.integers(0, spec.vocab, size=L)
    seq = np.concatenate([payload, [spec.sep_id], payload]).astype(np.int64)
    targets = np.zeros_like(seq)
    targets[:-1] = seq[1:]
    mask = np.zeros(seq.shape, dtype=bool)
    mask[L : 2 * L] = True
    return seq, targets, mask


_SAMPLERS = {"assoc_recall": _assoc_sample, "copy": _copy_sample}

_SPLIT_KEY = {"train": 1, "eval": 2}
MAX_SPLIT_ATTEMPTS = 1000


def sample(spec: TaskSpec, split: str, index: int):
    """The ``index``-th sample of ``split``, as numpy (tokens, targets, mask)."""
    want_eval = split == "eval"
    sampler = _SAMPLERS[spec.kind]
    # a miss has probability 1 - 1/modulus (eval) or 1/modulus (train) per draw,
    # so hitting this cap means the sample space is too small to split
    for attempt in range(MAX_SPLIT_ATTEMPTS):
        rng = _rng(spec.seed, _SPLIT_KEY[split], index, attempt)
        tokens, targets, mask = sampler(spec, rng)
        if in_eval_split(tokens, spec) == want_eval:
            return tokens, targets, mask
    raise ValueError(f"no {split} sample found after {MAX_SPLIT_ATTEMPTS} draws; task space too small to split")


def make_batch(spec: TaskSpec, split: str, start: int, size: int) -> Batch:
    rows = [sample(spec, split, start + i) for i in range(size)]
    return Batch(
        inputs=torch.from_numpy(np.stack([r[0] for r in rows])),
        targets=torch.from_numpy(np.stack([r[1] for r in rows])),
        mask=torch.from_numpy(np.stack([r[2] for r in rows])),
    )


def gen_assoc_recall(spec: TaskSpec, split: str = "train", batch_size: int = 32) -> Iterator[Batch]:
    if spec.kind != "assoc_recall":
        raise ValueError("spec is not an associative-recall task")
    step = 0
    while True:
        yield make_batch(spec, split, step * batch_size, batch_size)
        step += 1


def gen_copy(spec: TaskSpec, split: str = "train", batch_size: int = 32) -> Iterator[Batch]:
    if spec.kind != "copy":
        raise ValueError("spec is not a copy task")
    step = 0
    while True:
        yield make_batch(spec, split, step * batch_size, batch_size)
        step += 1


def copy_payloads(batch: Batch, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Recover (payload, echoed targets) from a copy batch."""
    L = spec.payload_len
    inputs = batch.inputs.numpy()
    echoed = batch.targets.numpy()[batch.mask.numpy()].reshape(len(batch), L)
    return inputs[:, :L], echoed


class CharCorpus:
    """Byte-level corpus split into a training prefix and an eval suffix."""

    def __init__(self, path: str | Path, spec: TaskSpec):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ValueError(f"cannot read corpus {path}: {exc}") from exc
        if not data:
            raise ValueError(f"corpus {path} is empty")
        self.spec = spec
        self.symbols = sorted(set(data))
        lookup = np.full(256, -1, dtype=np.int64)
        lookup[self.symbols] = np.arange(len(self.symbols))
        self.ids = lookup[np.frombuffer(data, dtype=np.uint8)]
        split = len(self.ids) - int(round(len(self.ids) * spec.eval_fraction))
        self.split_point = max(1, split) if len(self.ids) > 1 else len(self.ids)

    @property
    def pad_id(self) -> int:
        return len(self.symbols)

    @property
    def model_vocab(self) -> int:
        return len(self.symbols) + 1

    def decode(self, ids) -> bytes:
        return bytes(self.symbols[i] for i in ids if i < len(self.symbols))

    def _region(self, split: str) -> tuple[int, int]:
        return (0, self.split_point) if split == "train" else (self.split_point, len(self.ids))

    def windows(self, split: str) -> list[tuple[int, int]]:
        """Half-open [start, end) windows tiling the split; the last may be short."""
        lo, hi = self._region(split)
        n = self.spec.seq_len
        return [(s, min(s + n, hi)) for s in range(lo, hi, n)]

    def window_batch(self, split: str, windows: list[tuple[int, int]]) -> Batch:
        n = self.spec.seq_len
        ctx = self.spec.context if split == "eval" else 0
        lo, hi = self._region(split)
        B = len(windows)
        inputs = np.full((B, ctx + n), self.pad_id, dtype=np.int64)
        targets = np.zeros((B, ctx + n), dtype=np.int64)
        mask = np.zeros((B, ctx + n), dtype=bool)
        for b, (s, e) in enumerate(windows):
            c0 = max(lo, s - ctx)
            seg = self.ids[c0:e]
            off = ctx - (s - c0)
            inputs[b, off : off + len(seg)] = seg
            # next-byte targets; the final byte of the split has none
            nxt = self.ids[c0 + 1 : min(e + 1, hi)]
            targets[b, off : off + len(nxt)] = nxt
            sup = np.zeros(ctx + n, dtype=bool)
            sup[ctx : ctx + (e - s)] = True
            sup[off + len(nxt) :] = False
            mask[b] = sup
        return Batch(torch.from_numpy(inputs), torch.from_numpy(targets), torch.from_numpy(mask))

    def batches(self, split: str, batch_size: int, epoch: int = 0) -> Iterator[Batch]:
        wins = self.windows(split)
        if split == "train":
            order = _rng(self.spec.seed, epoch).permutation(len(wins))
            wins = [wins[i] for i in order]
        for i in range(0, len(wins), batch_size):
            yield self.window_batch(split, wins[i : i + batch_size])


def load_char_corpus(path: str | Path, spec: TaskSpec) -> CharCorpus:
    return CharCorpus(path, spec)


class SyntheticSource:
    """Train batches indexed by global step; a fixed eval set of ``size`` samples."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec

    @property
    def model_vocab(self) -> int:
        return self.spec.model_vocab

    def train_batch(self, step: int, batch_size: int) -> Batch:
        return make_batch(self.spec, "train", step * batch_size, batch_size)

    def eval_batches(self, size: int, batch_size: int) -> Iterator[Batch]:
        for start in range(0, size, batch_size):
            yield make_batch(self.spec, "eval", start, min(batch_size, size - start))


class CorpusSource:
    """Char-LM windows; each pass over the training windows uses a fresh permutation."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.corpus = load_char_corpus(spec.corpus, spec)
        self._train = self.corpus.windows("train")
        self._eval = self.corpus.windows("eval")
        if not self._train:
            raise ValueError("corpus has no training windows")

    @property
    def model_vocab(self) -> int:
        return self.corpus.model_vocab

    def train_batch(self, step: int, batch_size: int) -> Batch:
        n = len(self._train)
        picks = []
        for j in range(step * batch_size, (step + 1) * batch_size):
            epoch, i = divmod(j, n)
            picks.append(self._train[_rng(self.spec.seed, epoch).permutation(n)[i]])
        return self.corpus.window_batch("train", picks)

    def eval_batches(self, size: int, batch_size: int) -> Iterator[Batch]:
        wins = self._eval[:size]
        for i in range(0, len(wins), batch_size):
            yield self.corpus.window_batch("eval", wins[i : i + batch_size])


def data_source(spec: TaskSpec):
    return CorpusSource(spec) if spec.kind == "char_lm" else SyntheticSource(spec)
