"""Vocabularies, synthetic transduction tasks, TSV corpora and batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
SENTINEL = "_"


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token/id bijection with ids 0..3 reserved for pad, unk, begin, end."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            if tok in self._stoi:
                raise CorpusError(f"duplicate vocabulary entry {tok!r}")
            self._stoi[tok] = len(self._itos)
            self._itos.append(tok)

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = 5) -> "Vocabulary":
        """Keep tokens seen at least ``min_freq`` times; rarer ones become unknown.

        Order is frequency descending, then lexicographic, so two builds from
        the same text agree exactly.
        """
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self._itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    @property
    def tokens(self) -> list[str]:
        """Non-reserved entries in id order."""
        return self._itos[len(RESERVED) :]

    def index(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self._itos[i])
        return out


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[str], list[str]]]
    split: str = "train"
    max_len: int | None = None

    def __post_init__(self):
        for n, (src, tgt) in enumerate(self.pairs, 1):
            if not src or not tgt:
                raise CorpusError(f"pair {n} has an empty side")
            if self.max_len is not None and max(len(src), len(tgt)) > self.max_len:
                raise CorpusError(f"pair {n} exceeds max length {self.max_len}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def sources(self) -> list[list[str]]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[list[str]]:
        return [t for _, t in self.pairs]


# ------------------------------------------------------------------ TSV files


def load_tsv(path: str | Path, split: str = "train") -> ParallelCorpus:
    pairs = []
    # universal newlines make CRLF files read the same as LF files
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected exactly one tab, found {len(parts) - 1}")
            src, tgt = tokenize(parts[0]), tokenize(parts[1])
            if not src or not tgt:
                raise CorpusError(f"{path}:{lineno}: empty side")
            pairs.append((src, tgt))
    return ParallelCorpus(pairs, split)


def save_tsv(corpus: ParallelCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in corpus:
            fh.write(f"{detokenize(src)}\t{detokenize(tgt)}\n")


# ------------------------------------------------------------- synthetic tasks

TASK_KINDS = ("copy", "shift", "reverse")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "shift"
    shift: int = 2
    vocab_size: int = 16
    min_len: int = 6
    max_len: int = 12
    num_pairs: int = 5000
    valid_pairs: int = 200
    test_pairs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise CorpusError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        if not 1 <= self.vocab_size:
            raise CorpusError("vocab_size must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.kind == "shift" and not 0 <= self.shift < self.min_len:
            raise CorpusError(f"shift {self.shift} must be below the minimum length {self.min_len}")
        if min(self.num_pairs, self.valid_pairs, self.test_pairs) < 0:
            raise CorpusError("sample counts must be non-negative")

    def ideal_lagging(self, length: int) -> int:
        """Smallest wait-k that sees every source token a target needs."""
        if self.kind == "copy":
            return 1
        if self.kind == "shift":
            return self.shift + 1
        return length

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, val in d.items():
            key = key.replace("-", "_")
            if key not in known:
                raise CorpusError(f"unknown task field {key!r}")
            kwargs[key] = val if key == "kind" else int(val)
        return cls(**kwargs)

    def with_overrides(self, **kw) -> "TaskSpec":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def task_symbols(vocab_size: int) -> list[str]:
    if vocab_size <= 26:
        return [chr(ord("a") + i) for i in range(vocab_size)]
    return [f"w{i}" for i in range(vocab_size)]


def task_target(kind: str, source: Sequence[str], shift: int = 0) -> list[str]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return list(reversed(source))
    if kind == "shift":
        if shift >= len(source):
            raise CorpusError(f"shift {shift} needs sources longer than {shift}")
        # tail filled with a fixed sentinel so |y| == |x|
        return list(source[shift:]) + [SENTINEL] * shift
    raise CorpusError(f"unknown task kind {kind!r}")


def generate(task: TaskSpec) -> dict[str, ParallelCorpus]:
    """Deterministic train/valid/test corpora with pairwise-disjoint sources."""
    task.validate()
    rng = np.random.default_rng(task.seed)
    symbols = task_symbols(task.vocab_size)
    wanted = task.num_pairs + task.valid_pairs + task.test_pairs
    seen: set[tuple[str, ...]] = set()
    sources: list[list[str]] = []
    attempts = 0
    while len(sources) < wanted:
        attempts += 1
        if attempts > 50 * wanted + 1000:
            raise CorpusError("task space too small for the requested number of distinct pairs")
        n = int(rng.integers(task.min_len, task.max_len + 1))
        src = tuple(symbols[i] for i in rng.integers(0, task.vocab_size, size=n))
        if src in seen:
            continue
        seen.add(src)
        sources.append(list(src))
    pairs = [(s, task_target(task.kind, s, task.shift)) for s in sources]
    cut1 = task.num_pairs
    cut2 = cut1 + task.valid_pairs
    return {
        "train": ParallelCorpus(pairs[:cut1], "train"),
        "valid": ParallelCorpus(pairs[cut1:cut2], "valid"),
        "test": ParallelCorpus(pairs[cut2:], "test"),
    }


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CorpusError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


# ------------------------------------------------------------------- batching


@dataclass
class Batch:
    """Padded id arrays; sources end in EOS, targets are shifted by BOS."""

    src: np.ndarray
    src_lens: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_lens: np.ndarray
    indices: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def max_src_len(self) -> int:
        return int(self.src_lens.max())

    def num_tokens(self) -> int:
        return int(self.tgt_lens.sum())


def encode_pairs(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in corpus]


def collate(encoded: Sequence[tuple[list[int], list[int]]], indices: Sequence[int] | None = None) -> Batch:
    n = len(encoded)
    s_len = np.array([len(s) + 1 for s, _ in encoded])
    t_len = np.array([len(t) + 1 for _, t in encoded])
    src = np.full((n, s_len.max()), PAD, dtype=np.int64)
    tgt_in = np.full((n, t_len.max()), PAD, dtype=np.int64)
    tgt_out = np.full((n, t_len.max()), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(encoded):
        src[i, : len(s)] = s
        src[i, len(s)] = EOS
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    return Batch(src, s_len, tgt_in, tgt_out, t_len, list(indices if indices is not None else range(n)))


def _cost(encoded, idx: int) -> int:
    s, t = encoded[idx]
    return max(len(s), len(t)) + 1


def batch(
    encoded: Sequence[tuple[list[int], list[int]]],
    max_tokens: int,
    seed: int,
) -> tuple[list[Batch], int]:
    """Length-bucketed padded batches for one epoch.

    A batch's cost is its row count times its longest (EOS-terminated) side.
    Returns the batches and the number of pairs skipped for exceeding
    ``max_tokens`` on their own.
    """
    if not encoded:
        raise CorpusError("cannot batch an empty corpus")
    rng = np.random.default_rng(seed)
    costs = np.array([_cost(encoded, i) for i in range(len(encoded))])
    tie = rng.permutation(len(encoded))
    order = np.lexsort((tie, costs))
    skipped = int((costs > max_tokens).sum())
    if skipped:
        log.warning("skipping %d pair(s) longer than max_tokens=%d", skipped, max_tokens)
    chunks: list[list[int]] = []
    current: list[int] = []
    width = 0
    for idx in order:
        c = int(costs[idx])
        if c > max_tokens:
            continue
        if current and max(width, c) * (len(current) + 1) > max_tokens:
            chunks.append(current)
            current, width = [], 0
        current.append(int(idx))
        width = max(width, c)
    if current:
        chunks.append(current)
    perm = rng.permutation(len(chunks))
    return [collate([encoded[i] for i in chunks[j]], chunks[j]) for j in perm], skipped
