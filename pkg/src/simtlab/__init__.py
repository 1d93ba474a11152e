"""Desk-scale simultaneous translation: wait-k decoding, lagging-routed
adapters, an uncertainty-threshold adaptive policy and latency metrics."""

from .corpus import ParallelCorpus, TaskSpec, Vocabulary, generate, load_tsv, save_tsv
from .metrics import average_lagging, average_proportion, bleu, consecutive_wait, differentiable_average_lagging
from .model import ModelConfig, SimtModel, route
from .policy import ActionTrace, DelaySchedule, PolicyConfig, adaptive_decode, fixed_waitk_decode
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActionTrace",
    "DelaySchedule",
    "ModelConfig",
    "ParallelCorpus",
    "PolicyConfig",
    "SimtModel",
    "TaskSpec",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "adaptive_decode",
    "average_lagging",
    "average_proportion",
    "bleu",
    "consecutive_wait",
    "differentiable_average_lagging",
    "fixed_waitk_decode",
    "generate",
    "load_checkpoint",
    "load_tsv",
    "route",
    "save_checkpoint",
    "save_tsv",
    "train",
]
