"""Multi-path training loop with Adam and an inverse-square-root schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .checkpoint import read_archive, write_archive
from .corpus import Batch, TaskSpec, Vocabulary, batch, collate
from .model import ModelConfig, SimtModel
from .policy import sample_train_k

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class UsageError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_updates: int = 400
    warmup_init_lr: float = 1e-7
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    max_updates: int = 5000
    max_tokens: int = 1024
    seed: int = 0
    valid_every: int = 500
    checkpoint_every: int = 0
    fixed_k: int | None = None
    multipath: bool = True
    # asserts per-adapter gradient isolation every N updates (0 disables)
    isolation_check_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.validate()

    def validate(self) -> None:
        if self.warmup_updates < 1:
            raise UsageError("warmup_updates must be at least 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise UsageError("label smoothing must lie in [0, 1)")
        if (self.fixed_k is not None) == self.multipath:
            raise UsageError("exactly one of fixed_k and multipath must be active")
        if self.fixed_k is not None and self.fixed_k < 1:
            raise UsageError("fixed_k must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# Appendix-scale settings are kept as the "paper" profile; "desk" is what the
# test suite trains. "tiny" exists for smoke tests.
PROFILES: dict[str, tuple[dict, dict]] = {
    "paper": (
        dict(embed_dim=512, ffn_dim=1024, num_layers=6, num_heads=4, dropout=0.3,
             adapter_lagging=(1, 3, 5, 7, 9, 11, 13, 15), adapter_bottleneck=64),
        dict(lr=5e-4, warmup_updates=4000, weight_decay=1e-4, label_smoothing=0.1, max_tokens=16000),
    ),
    "desk": (
        dict(embed_dim=64, ffn_dim=128, num_layers=2, num_heads=2, dropout=0.1,
             adapter_lagging=(1, 3, 5, 7), adapter_bottleneck=16),
        dict(lr=1e-3, warmup_updates=400, max_updates=5000, max_tokens=1024),
    ),
    "tiny": (
        dict(embed_dim=16, ffn_dim=32, num_layers=1, num_heads=2, dropout=0.0,
             adapter_lagging=(1, 3), adapter_bottleneck=4),
        dict(lr=3e-3, warmup_updates=20, max_updates=60, max_tokens=256, valid_every=30),
    ),
}


def lr_at(update: int, cfg: TrainConfig) -> float:
    """Linear warm-up from the initial rate to ``lr``, then ``lr * sqrt(warmup / u)``.

    The ramp runs from update 1 (the initial rate) to update ``warmup`` (the peak).
    """
    if update < 1:
        raise ValueError("updates are counted from 1")
    w = cfg.warmup_updates
    if update < w:
        return cfg.warmup_init_lr + (cfg.lr - cfg.warmup_init_lr) * (update - 1) / (w - 1)
    if update == w:
        return cfg.lr
    return cfg.lr * math.sqrt(w / update)


@dataclass
class TrainState:
    update: int = 0
    epoch: int = 0
    cursor: int = 0
    best_valid: float = float("inf")
    rng_state: dict | None = None
    moments: dict[str, np.ndarray] = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "update": self.update,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "best_valid": None if math.isinf(self.best_valid) else self.best_valid,
            "rng_state": self.rng_state,
        }


@dataclass
class LogRow:
    update: int
    train_loss: float
    valid_loss: float
    lr: float

    def tsv(self) -> str:
        return f"{self.update}\t{self.train_loss:.6f}\t{self.valid_loss:.6f}\t{self.lr:.8g}"


LOG_HEADER = "update\ttrain_loss\tvalid_loss\tlr"


class Trainer:
    def __init__(
        self,
        model: SimtModel,
        train_pairs: Sequence[tuple[list[int], list[int]]],
        cfg: TrainConfig,
        valid_pairs: Sequence[tuple[list[int], list[int]]] = (),
        state: TrainState | None = None,
    ):
        if not train_pairs:
            raise UsageError("training corpus is empty")
        self.model = model
        self.pairs = list(train_pairs)
        self.cfg = cfg
        self.valid = collate(valid_pairs) if valid_pairs else None
        self.state = state or TrainState()
        self.rng = np.random.default_rng(cfg.seed)
        if self.state.rng_state is not None:
            self.rng.bit_generator.state = self.state.rng_state
        self.k_history: list[int] = []
        self.log: list[LogRow] = []
        self._epoch_batches: list[Batch] | None = None

    # --------------------------------------------------------------- data

    def _batches(self) -> list[Batch]:
        if self._epoch_batches is None:
            seed = self.cfg.seed * 1_000_003 + self.state.epoch
            self._epoch_batches, _ = batch(self.pairs, self.cfg.max_tokens, seed)
            if not self._epoch_batches:
                raise UsageError(f"no pair fits within max_tokens={self.cfg.max_tokens}")
        return self._epoch_batches

    def next_batch(self) -> Batch:
        batches = self._batches()
        if self.state.cursor >= len(batches):
            self.state.epoch += 1
            self.state.cursor = 0
            self._epoch_batches = None
            batches = self._batches()
        b = batches[self.state.cursor]
        self.state.cursor += 1
        return b

    # --------------------------------------------------------------- steps

    def choose_k(self, b: Batch) -> int:
        if self.cfg.fixed_k is not None:
            return self.cfg.fixed_k
        return sample_train_k(self.rng, b.max_src_len)

    def _adam(self, lr: float) -> None:
        b1, b2 = self.cfg.adam_betas
        u = self.state.update
        c1 = 1.0 - b1**u
        c2 = 1.0 - b2**u
        for name, p in self.model.trainable().items():
            g = p.grad
            if g is None:
                continue
            m = self.state.moments.get(f"m.{name}")
            v = self.state.moments.get(f"v.{name}")
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.state.moments[f"m.{name}"] = m
            self.state.moments[f"v.{name}"] = v
            if self.cfg.weight_decay:
                p.data = p.data - lr * self.cfg.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.adam_eps)

    def _check_isolation(self, k: int) -> None:
        active = self.model.route_lagging(k)
        for name, p in self.model.adapter_params().items():
            if f".adapter.k{active}." in name + ".":
                continue
            if p.grad is not None and np.any(p.grad != 0):
                raise RuntimeError(f"adapter {name} received gradient while routing k={k} to k_A={active}")

    def step(self) -> float:
        b = self.next_batch()
        k = self.choose_k(b)
        self.k_history.append(k)
        self.state.update += 1
        lr = lr_at(self.state.update, self.cfg)
        self.model.zero_grad()
        loss = self.model.forward_train(b, k, rng=self.rng, epsilon=self.cfg.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at update {self.state.update} (k={k}, lr={lr:.3g})")
        nd.backward(loss, self.model.trainable().values())
        every = self.cfg.isolation_check_every
        if every and self.state.update % every == 0:
            self._check_isolation(k)
        self._adam(lr)
        return value

    def validation_loss(self) -> float:
        """Mean loss over one lagging per adapter, or the fixed lagging."""
        if self.valid is None:
            return float("nan")
        ks = [self.cfg.fixed_k] if self.cfg.fixed_k is not None else list(self.model.config.adapter_lagging)
        with nd.no_grad():
            losses = [self.model.forward_train(self.valid, k, None, self.cfg.label_smoothing).item() for k in ks]
        return float(np.mean(losses))

    def run(self, until: int | None = None, on_checkpoint=None) -> list[LogRow]:
        until = self.cfg.max_updates if until is None else until
        window: list[float] = []
        while self.state.update < until:
            window.append(self.step())
            u = self.state.update
            if self.cfg.valid_every and (u % self.cfg.valid_every == 0 or u == until):
                vl = self.validation_loss()
                if vl < self.state.best_valid:
                    self.state.best_valid = vl
                row = LogRow(u, float(np.mean(window)), vl, lr_at(u, self.cfg))
                self.log.append(row)
                log.info("update %d  train %.4f  valid %.4f  lr %.3g", u, row.train_loss, vl, row.lr)
                window = []
            if on_checkpoint and self.cfg.checkpoint_every and u % self.cfg.checkpoint_every == 0:
                on_checkpoint(self)
        self.state.rng_state = self.rng.bit_generator.state
        return self.log

    def snapshot(self) -> TrainState:
        self.state.rng_state = self.rng.bit_generator.state
        return self.state


def train(model, train_pairs, cfg: TrainConfig, valid_pairs=()) -> tuple[SimtModel, list[LogRow]]:
    trainer = Trainer(model, train_pairs, cfg, valid_pairs)
    trainer.run()
    return model, trainer.log


def train_frozen_adapters(backbone: SimtModel | None, train_pairs, cfg: TrainConfig, valid_pairs=()):
    """Train only the adapters on top of a pretrained backbone."""
    if backbone is None:
        raise UsageError("frozen-adapter training needs a pretrained backbone")
    backbone.config = replace(backbone.config, backbone_frozen=True)
    backbone.apply_freeze()
    return train(backbone, train_pairs, cfg, valid_pairs)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: SimtModel
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    task: TaskSpec | None = None
    train_config: TrainConfig | None = None
    state: TrainState | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {
        "model": ckpt.model.config.to_dict(),
        "src_vocab": ckpt.src_vocab.tokens,
        "tgt_vocab": ckpt.tgt_vocab.tokens,
        "task": ckpt.task.to_dict() if ckpt.task else None,
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "train_state": ckpt.state.meta() if ckpt.state else None,
        "extra": ckpt.extra,
    }
    arrays = {f"param/{n}": a for n, a in ckpt.model.state_dict().items()}
    if ckpt.state:
        arrays.update({f"optim/{n}": a for n, a in ckpt.state.moments.items()})
    write_archive(path, meta, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, arrays = read_archive(path)
    config = ModelConfig.from_dict(meta["model"])
    model = SimtModel(config)
    model.load_state_dict({n[len("param/") :]: a for n, a in arrays.items() if n.startswith("param/")})
    state = None
    if meta.get("train_state"):
        s = meta["train_state"]
        state = TrainState(
            update=s["update"],
            epoch=s["epoch"],
            cursor=s["cursor"],
            best_valid=float("inf") if s["best_valid"] is None else s["best_valid"],
            rng_state=s["rng_state"],
            moments={n[len("optim/") :]: a for n, a in arrays.items() if n.startswith("optim/")},
        )
    return Checkpoint(
        model=model,
        src_vocab=Vocabulary(meta["src_vocab"]),
        tgt_vocab=Vocabulary(meta["tgt_vocab"]),
        task=TaskSpec.from_dict(meta["task"]) if meta.get("task") else None,
        train_config=TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None,
        state=state,
        extra=meta.get("extra") or {},
    )
