"""READ/WRITE policies: fixed wait-k, multi-path k sampling, adaptive thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import EOS

READ, WRITE = "R", "W"


class TraceError(ValueError):
    pass


def wait_k_schedule(k: int, src_len: int, t: int) -> int:
    """g_k(t) = min(|x|, t + k - 1)."""
    if k < 1 or t < 1 or src_len < 1:
        raise ValueError(f"need k, t, |x| >= 1 (got k={k}, t={t}, |x|={src_len})")
    return min(src_len, t + k - 1)


def sample_train_k(rng: np.random.Generator, max_src_len: int) -> int:
    """Lagging for one training batch, uniform over ``1..max_src_len``."""
    if max_src_len < 1:
        raise ValueError("source length must be at least 1")
    return int(rng.integers(1, max_src_len + 1))


@dataclass(frozen=True)
class DelaySchedule:
    """Source tokens read, g(t), when each target token t = 1..|y| is written."""

    src_len: int
    g: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(int(v) for v in self.g))
        if self.src_len < 1 or not self.g:
            raise TraceError("schedules need |x| >= 1 and |y| >= 1")
        if any(b < a for a, b in zip(self.g, self.g[1:])):
            raise TraceError(f"delays must be non-decreasing: {self.g}")
        if self.g[0] < 0 or self.g[-1] > self.src_len:
            raise TraceError(f"delays must lie in [0, {self.src_len}]: {self.g}")

    @property
    def tgt_len(self) -> int:
        return len(self.g)

    @property
    def complete(self) -> bool:
        return self.g[-1] == self.src_len

    @classmethod
    def wait_k(cls, k: int, src_len: int, tgt_len: int) -> "DelaySchedule":
        return cls(src_len, tuple(wait_k_schedule(k, src_len, t) for t in range(1, tgt_len + 1)))

    @classmethod
    def full_sentence(cls, src_len: int, tgt_len: int) -> "DelaySchedule":
        return cls(src_len, (src_len,) * tgt_len)


@dataclass
class ActionTrace:
    """READ/WRITE history of one sentence.

    A READ consumes one item of the source stream, which may be the end
    marker; a WRITE emits one token, which may be end-of-sequence. ``src_len``
    counts real source tokens only.
    """

    actions: str
    src_len: int | None = None
    truncated: bool = False
    eos_written: bool = False

    def __post_init__(self):
        if set(self.actions) - {READ, WRITE}:
            raise TraceError(f"trace may only contain R and W: {self.actions!r}")

    def __str__(self) -> str:
        return self.actions

    @property
    def reads(self) -> int:
        return self.actions.count(READ)

    @property
    def writes(self) -> int:
        return self.actions.count(WRITE)

    def reads_before_writes(self) -> list[int]:
        out, n = [], 0
        for a in self.actions:
            if a == READ:
                n += 1
            else:
                out.append(n)
        return out

    def delays(self, src_len: int | None = None, tgt_len: int | None = None) -> list[int]:
        """g(t) for the first ``tgt_len`` writes, clamped to ``src_len``."""
        src_len = src_len if src_len is not None else self.src_len
        if src_len is None:
            # a complete trace reads every source token plus the end marker
            src_len = self.reads - 1
        if tgt_len is None:
            tgt_len = self.writes - 1 if self.eos_written else self.writes
        per_write = self.reads_before_writes()
        if tgt_len > len(per_write):
            raise TraceError(f"trace has {len(per_write)} writes, {tgt_len} requested")
        return [min(g, src_len) for g in per_write[:tgt_len]]

    def to_schedule(self, src_len: int | None = None, tgt_len: int | None = None) -> DelaySchedule:
        src_len = src_len if src_len is not None else self.src_len
        if src_len is None:
            src_len = self.reads - 1
        return DelaySchedule(src_len, tuple(self.delays(src_len, tgt_len)))


def parse_traces(lines: Iterable[str]) -> list[ActionTrace]:
    return [ActionTrace(line.strip()) for line in lines if line.strip()]


def format_traces(traces: Sequence[ActionTrace]) -> str:
    return "".join(f"{t.actions}\n" for t in traces)


@dataclass(frozen=True)
class PolicyConfig:
    k_min: int = 1
    k_max: int = 9
    rho_min: float = 1.0
    rho_max: float = 0.0

    def __post_init__(self):
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError(f"need 1 <= k_min <= k_max, got ({self.k_min}, {self.k_max})")
        if not (np.isfinite(self.rho_min) and np.isfinite(self.rho_max)):
            raise ValueError("thresholds must be finite")
        if self.rho_min < 0 or self.rho_max < 0:
            raise ValueError("thresholds must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.rho_min:g},{self.rho_max:g}"


def threshold(k: int, cfg: PolicyConfig) -> float:
    """rho_k = rho_min - d * (k - 1), d = (rho_min - rho_max) / (k_max - k_min)."""
    if not cfg.k_min <= k <= cfg.k_max:
        raise ValueError(f"lagging {k} outside [{cfg.k_min}, {cfg.k_max}]")
    if cfg.k_min == cfg.k_max:
        return cfg.rho_min
    d = (cfg.rho_min - cfg.rho_max) / (cfg.k_max - cfg.k_min)
    return cfg.rho_min - d * (k - 1)


# paired endpoint grid swept by default: a falling rho_min with rho_max = 0,
# then rho_min = 1 with a rising rho_max
DEFAULT_GRID: tuple[tuple[float, float], ...] = (
    (0.2, 0.0),
    (0.4, 0.0),
    (0.6, 0.0),
    (0.8, 0.0),
    (1.0, 0.0),
    (1.0, 0.2),
    (1.0, 0.4),
    (1.0, 0.6),
    (1.0, 0.8),
)


@dataclass
class Decoded:
    tokens: list[int]
    trace: ActionTrace
    norms: list[dict[int, float]] = field(default_factory=list)


class _Stream:
    """Source tokens followed by one end marker, read on demand."""

    def __init__(self, source: Iterable[int]):
        toks = [int(t) for t in source]
        if toks and toks[-1] == EOS:
            toks = toks[:-1]
        if not toks:
            raise ValueError("source stream must yield at least one token before the end marker")
        self.tokens = toks
        self.pos = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def exhausted(self) -> bool:
        return self.pos > len(self.tokens)

    def read(self) -> int:
        if self.exhausted:
            raise TraceError("read past the end marker")
        tok = self.tokens[self.pos] if self.pos < len(self.tokens) else EOS
        self.pos += 1
        return tok


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


class _Session:
    def __init__(self, model, source, max_len: int | None, record_norms: bool):
        self.stream = _Stream(source)
        self.dec = model.incremental(record_norms=record_norms)
        self.actions: list[str] = []
        self.out: list[int] = []
        self.max_len = default_max_len(len(self.stream)) if max_len is None else max_len
        self.eos = False
        self.truncated = False

    def read(self) -> None:
        self.dec.append_source(self.stream.read())
        self.actions.append(READ)

    def write(self, token: int) -> None:
        self.dec.commit(token)
        self.actions.append(WRITE)
        if token == EOS:
            self.eos = True
        else:
            self.out.append(token)
            if len(self.out) >= self.max_len:
                self.truncated = True

    @property
    def done(self) -> bool:
        return self.eos or self.truncated

    def result(self) -> Decoded:
        trace = ActionTrace("".join(self.actions), len(self.stream), self.truncated, self.eos)
        return Decoded(self.out, trace, list(self.dec.norms))


def fixed_waitk_decode(model, source, k: int, max_len: int | None = None, record_norms: bool = False) -> Decoded:
    """Greedy wait-k decoding with adapter ``route(k)`` throughout."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    s = _Session(model, source, max_len, record_norms)
    while not s.done:
        need = len(s.out) + k
        while s.dec.num_read < need and not s.stream.exhausted:
            s.read()
        probs = s.dec.query(s.dec.num_read, k)
        s.write(int(np.argmax(probs)))
    return s.result()


def adaptive_decode(model, source, cfg: PolicyConfig, max_len: int | None = None, record_norms: bool = False) -> Decoded:
    """Uncertainty-thresholded READ/WRITE decoding.

    Lagging is ``k = reads - writes`` and starts at 1 with the first source
    token already read. Below ``k_min`` the policy always reads; otherwise it
    reads while ``k < k_max`` and the top probability is under ``rho_k``.
    Once the end marker is read the rest is generated with lagging
    ``k_max``.
    """
    s = _Session(model, source, max_len, record_norms)
    s.read()
    while not s.stream.exhausted and not s.done:
        k = s.dec.num_read - len(s.out)
        if k < cfg.k_min:
            s.read()
            continue
        probs = s.dec.query(s.dec.num_read, min(k, cfg.k_max))
        top = int(np.argmax(probs))
        if k < cfg.k_max and probs[top] < threshold(k, cfg):
            s.read()
        else:
            s.write(top)
    while not s.done:
        probs = s.dec.query(s.dec.num_read, cfg.k_max)
        s.write(int(np.argmax(probs)))
    return s.result()
