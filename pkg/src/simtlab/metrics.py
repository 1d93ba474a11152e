"""Latency metrics over delay schedules, corpus BLEU and token accuracy.

``g(t)`` is the number of source tokens read when target token ``t`` is
written; ``|x|`` and ``|y|`` exclude end-of-sequence markers.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .policy import DelaySchedule


class IncompleteScheduleError(ValueError):
    """The schedule never reads the whole source."""


def _tau(s: DelaySchedule, strict: bool) -> int:
    for t, g in enumerate(s.g, 1):
        if g == s.src_len:
            return t
    if strict:
        raise IncompleteScheduleError(f"g never reaches |x|={s.src_len}: {s.g}")
    return s.tgt_len


def average_lagging(s: DelaySchedule, strict: bool = True) -> float:
    """Mean lag behind an ideal zero-wait writer, up to the first full read.

    With ``strict=False`` a schedule that stops before reading everything is
    summed over all of its steps instead of raising.
    """
    tau = _tau(s, strict)
    rate = s.tgt_len / s.src_len
    return sum(s.g[t - 1] - (t - 1) / rate for t in range(1, tau + 1)) / tau


def consecutive_wait(s: DelaySchedule) -> float:
    steps = [b - a for a, b in zip((0,) + s.g[:-1], s.g)]
    waits = sum(1 for d in steps if d > 0)
    if waits == 0:
        raise IncompleteScheduleError("schedule never reads")
    return sum(steps) / waits


def average_proportion(s: DelaySchedule) -> float:
    return sum(s.g) / (s.src_len * s.tgt_len)


def differentiable_average_lagging(s: DelaySchedule) -> float:
    # the deduction divides by |x|/|y|, unlike the |y|/|x| rate used by AL
    ratio = s.src_len / s.tgt_len
    total = 0.0
    prev = 0.0
    for i, g in enumerate(s.g, 1):
        cur = float(g) if i == 1 else max(float(g), prev + ratio)
        total += cur - (i - 1) / ratio
        prev = cur
    return total / s.tgt_len


def latency(s: DelaySchedule, strict: bool = True) -> dict[str, float]:
    return {
        "AL": average_lagging(s, strict),
        "CW": consecutive_wait(s),
        "AP": average_proportion(s),
        "DAL": differentiable_average_lagging(s),
    }


# ----------------------------------------------------------------- quality


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], smooth: bool = False, max_order: int = 4) -> float:
    """Corpus BLEU (0-100) over pre-tokenised sentences, one reference each.

    ``smooth`` adds one to the match and total counts of every order above
    unigrams, which keeps tiny corpora from collapsing to zero.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        m, tot = matches[n], totals[n]
        if smooth and n > 0:
            m, tot = m + 1, tot + 1
        if m == 0 or tot == 0:
            return 0.0
        log_p += math.log(m / tot)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_order)


def token_accuracy(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Position-wise matches over the longer side of each pair, pooled."""
    hit = total = 0
    for hyp, ref in zip(hypotheses, references, strict=True):
        hit += sum(a == b for a, b in zip(hyp, ref))
        total += max(len(hyp), len(ref))
    return hit / total if total else 0.0


@dataclass
class MetricReport:
    AL: float
    CW: float
    AP: float
    DAL: float
    BLEU: float
    token_accuracy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def corpus_report(
    schedules: Sequence[DelaySchedule | None],
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    smooth_bleu: bool = False,
) -> MetricReport:
    """Unweighted sentence means of the latency metrics plus corpus quality.

    ``None`` entries (empty hypotheses) are left out of the latency means.
    """
    rows = [latency(s, strict=False) for s in schedules if s is not None]
    mean = {k: (sum(r[k] for r in rows) / len(rows) if rows else float("nan")) for k in ("AL", "CW", "AP", "DAL")}
    return MetricReport(
        BLEU=bleu(hypotheses, references, smooth=smooth_bleu),
        token_accuracy=token_accuracy(hypotheses, references),
        **mean,
    )
