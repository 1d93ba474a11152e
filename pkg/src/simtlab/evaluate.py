"""Corpus-level decoding under a policy setting and trade-off tables."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .corpus import ParallelCorpus, Vocabulary
from .metrics import corpus_report
from .model import SimtModel, adapter_norms
from .policy import ActionTrace, Decoded, PolicyConfig, adaptive_decode, fixed_waitk_decode

COLUMNS = ("policy", "setting", "BLEU", "acc", "AL", "CW", "AP", "DAL", "seconds")


@dataclass
class EvalRecord:
    policy: str
    setting: str
    BLEU: float
    acc: float
    AL: float
    CW: float
    AP: float
    DAL: float
    seconds: float

    def cells(self, timing: bool = True) -> list[str]:
        secs = f"{self.seconds:.3f}" if timing else "0"
        nums = [f"{v:.4f}" for v in (self.BLEU, self.acc, self.AL, self.CW, self.AP, self.DAL)]
        return [self.policy, self.setting, *nums, secs]

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.BLEU, self.acc, self.AL, self.CW, self.AP, self.DAL, self.seconds))


@dataclass
class CorpusDecode:
    hypotheses: list[list[str]]
    traces: list[ActionTrace]
    norms: list[list[dict[int, float]]]
    seconds: float


def decode_corpus(
    model: SimtModel,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    policy: int | PolicyConfig,
    record_norms: bool = False,
) -> CorpusDecode:
    hyps, traces, norms = [], [], []
    start = time.perf_counter()
    for src, _ in corpus:
        ids = src_vocab.encode(src)
        if isinstance(policy, PolicyConfig):
            out: Decoded = adaptive_decode(model, ids, policy, record_norms=record_norms)
        else:
            out = fixed_waitk_decode(model, ids, policy, record_norms=record_norms)
        hyps.append(tgt_vocab.decode(out.tokens))
        traces.append(out.trace)
        norms.append(out.norms)
    return CorpusDecode(hyps, traces, norms, time.perf_counter() - start)


def score(corpus: ParallelCorpus, dec: CorpusDecode, policy: str, setting: str, smooth_bleu: bool = False) -> EvalRecord:
    schedules = [
        t.to_schedule(len(src), len(h)) if h else None
        for (src, _), t, h in zip(corpus, dec.traces, dec.hypotheses)
    ]
    rep = corpus_report(schedules, dec.hypotheses, corpus.targets(), smooth_bleu)
    return EvalRecord(policy, setting, rep.BLEU, rep.token_accuracy, rep.AL, rep.CW, rep.AP, rep.DAL, dec.seconds)


def evaluate_fixed(model, corpus, src_vocab, tgt_vocab, k: int, smooth_bleu: bool = False):
    dec = decode_corpus(model, corpus, src_vocab, tgt_vocab, k)
    return score(corpus, dec, "fixed", str(k), smooth_bleu), dec


def evaluate_adaptive(model, corpus, src_vocab, tgt_vocab, cfg: PolicyConfig, smooth_bleu: bool = False, record_norms: bool = False):
    dec = decode_corpus(model, corpus, src_vocab, tgt_vocab, cfg, record_norms=record_norms)
    return score(corpus, dec, "adaptive", cfg.label, smooth_bleu), dec


def sort_records(records: Sequence[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.AL, r.policy, r.setting))


def write_table(records: Sequence[EvalRecord], fh: TextIO, timing: bool = True) -> None:
    fh.write("\t".join(COLUMNS) + "\n")
    for r in sort_records(records):
        fh.write("\t".join(r.cells(timing)) + "\n")


def read_table(fh: TextIO) -> list[EvalRecord]:
    lines = [l.rstrip("\n") for l in fh if l.strip()]
    if not lines or tuple(lines[0].split("\t")) != COLUMNS:
        raise ValueError("not a trade-off table: header mismatch")
    out = []
    for line in lines[1:]:
        c = line.split("\t")
        out.append(EvalRecord(c[0], c[1], *map(float, c[2:])))
    return out


def norm_matrix(
    model: SimtModel,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    configs: Sequence[PolicyConfig],
) -> tuple[tuple[int, ...], list[str], np.ndarray]:
    """Mean adapter-output norms, one row per adapter layer, one column per setting."""
    layers = model.config.layers_with_adapters
    if not layers:
        raise ValueError("model has no adapters to instrument")
    cols = []
    for cfg in configs:
        dec = decode_corpus(model, corpus, src_vocab, tgt_vocab, cfg, record_norms=True)
        cols.append(adapter_norms(dec.norms, layers))
    return layers, [c.label for c in configs], np.stack(cols, axis=1)
