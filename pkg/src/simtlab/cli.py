"""Command-line entry point: ``simtlab <command> [flags]``.

Commands write tab-separated tables to stdout or ``--out``. Every flag may
also come from a ``--config`` file of ``key=value`` lines; flags given on the
command line win. ``SIMTLAB_LOG`` sets log verbosity (DEBUG, INFO, WARNING).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

from .checkpoint import CheckpointError
from .corpus import CorpusError, ParallelCorpus, TaskSpec, Vocabulary, encode_pairs, generate, load_tsv, read_config, save_tsv
from .evaluate import EvalRecord, decode_corpus, norm_matrix, score, write_table
from .metrics import corpus_report, latency
from .model import ModelConfig, RoutingError, SimtModel
from .policy import DEFAULT_GRID, PolicyConfig, TraceError, fixed_waitk_decode, format_traces, parse_traces
from .trainer import (
    LOG_HEADER,
    PROFILES,
    Checkpoint,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    UsageError,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("simtlab")

LOG_ENV = "SIMTLAB_LOG"


class CommandError(RuntimeError):
    """A well-formed request that failed while running."""


# ------------------------------------------------------------------ parsing


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _grid(text: str) -> tuple[tuple[float, float], ...]:
    """``"0.2:0,1:0.4"`` -> ((0.2, 0.0), (1.0, 0.4))."""
    out = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        try:
            a, b = item.split(":")
            out.append((float(a), float(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid points look like rho_min:rho_max, got {item!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty grid")
    return tuple(out)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic task")
    g.add_argument("--task", choices=("copy", "shift", "reverse"), help="generate a synthetic corpus of this kind")
    g.add_argument("--shift", type=int, help="offset j of the shift task (default 2)")
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--min-len", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--num-pairs", type=int)
    g.add_argument("--valid-pairs", type=int)
    g.add_argument("--test-pairs", type=int)
    g.add_argument("--task-seed", type=int, help="corpus seed (defaults to --seed)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--test", type=Path, help="TSV test split; defaults to the checkpoint's synthetic task")
    p.add_argument("--limit", type=int, help="evaluate only the first N test pairs")
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=9)
    p.add_argument("--grid", type=_grid, help="threshold pairs rho_min:rho_max,... (default: the 9-point grid)")
    p.add_argument("--out", type=Path, help="write the table here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version="simtlab 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", type=Path, help="key=value file supplying defaults for any flag")
    _add_task_flags(p)
    p.add_argument("--corpus", type=Path, help="TSV training corpus (instead of --task)")
    p.add_argument("--valid", type=Path, help="TSV validation corpus")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adapter-lagging", type=_int_list, help='adapter lagging list, e.g. "1,3,5,7"')
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--adapter-layers", type=_int_list, help="decoder layers carrying adapters (default all)")
    p.add_argument("--no-adapters", action="store_true", help="plain multi-path model without adapters")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--multipath", action="store_true", help="sample k per batch (default)")
    mode.add_argument("--fixed-k", type=int, help="train a single wait-k model")
    p.add_argument("--frozen-backbone", type=Path, help="checkpoint whose backbone stays fixed; only adapters train")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--max-updates", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--valid-every", type=int)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="training log TSV (default: <out>.log.tsv)")

    p = sub.add_parser("sweep", help="evaluate fixed and adaptive policies into a trade-off table")
    p.add_argument("--config", type=Path)
    _add_eval_flags(p)
    p.add_argument("--policy", choices=("fixed", "adaptive", "both"), default="both")
    p.add_argument("--k-list", type=_int_list, default=(1, 3, 5, 7, 9))
    p.add_argument("--smooth-bleu", action="store_true", help="add-one smoothing for n > 1")
    p.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column")
    p.add_argument("--traces-dir", type=Path, help="also write per-setting traces and hypotheses here")

    p = sub.add_parser("instrument-norms", help="mean adapter output norms per layer and setting")
    p.add_argument("--config", type=Path)
    _add_eval_flags(p)

    p = sub.add_parser("time", help="wall-clock decoding time per k over repeated runs")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--baseline", type=Path, help="no-adapter multi-path checkpoint to time alongside")
    p.add_argument("--test", type=Path)
    p.add_argument("--limit", type=int)
    p.add_argument("--k-list", type=_int_list, default=(1, 3, 5, 7, 9))
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("metrics", help="recompute latency and quality from saved traces")
    p.add_argument("--config", type=Path)
    p.add_argument("--traces", type=Path, required=True, help="one R/W action string per line")
    p.add_argument("--corpus", type=Path, help="TSV test pairs: source lengths and references")
    p.add_argument("--hyps", type=Path, help="hypotheses, one per line")
    p.add_argument("--smooth-bleu", action="store_true")
    p.add_argument("--per-sentence", action="store_true", help="one row per sentence instead of the corpus mean")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("generate", help="write a synthetic task as train/valid/test TSV files")
    p.add_argument("--config", type=Path)
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    parser.commands = sub.choices
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Load ``--config`` values as subcommand defaults, then parse ``argv``."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    sub = parser.commands.get(command)
    if path is None or sub is None:
        return parser.parse_args(argv)
    try:
        values = read_config(path)
    except (OSError, CorpusError) as exc:
        sub.error(str(exc))
    actions = {a.dest: a for a in sub._actions if a.option_strings}  # noqa: SLF001
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            sub.error(f"{path}: unknown setting {key!r}")
        try:
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                defaults[dest] = _bool(raw)
            elif action.choices is not None and raw not in action.choices:
                raise ValueError(f"choose from {sorted(action.choices)}")
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            sub.error(f"{path}: {key}: {exc}")
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


@contextmanager
def _output(path: Path | None):
    if path is None:
        yield sys.stdout
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yield fh


# ------------------------------------------------------------------- helpers


def _task_from_args(args) -> TaskSpec | None:
    if args.task is None:
        return None
    seed = args.task_seed if args.task_seed is not None else args.seed
    task = TaskSpec(kind=args.task).with_overrides(
        shift=args.shift,
        vocab_size=args.vocab_size,
        min_len=args.min_len,
        max_len=args.max_len,
        num_pairs=args.num_pairs,
        valid_pairs=args.valid_pairs,
        test_pairs=args.test_pairs,
        seed=seed,
    )
    try:
        task.validate()
    except CorpusError as exc:
        raise UsageError(str(exc)) from exc
    return task


def _test_split(args, ckpt: Checkpoint) -> ParallelCorpus:
    if args.test is not None:
        corpus = load_tsv(args.test, split="test")
    elif ckpt.task is not None:
        corpus = generate(ckpt.task)["test"]
    else:
        raise UsageError("checkpoint has no synthetic task; pass --test")
    if args.limit is not None:
        if args.limit < 1:
            raise UsageError("--limit must be positive")
        corpus = ParallelCorpus(corpus.pairs[: args.limit], corpus.split)
    if not len(corpus):
        raise UsageError("test split is empty")
    return corpus


def _policy_grid(args, model: SimtModel) -> list[PolicyConfig]:
    try:
        configs = [PolicyConfig(args.k_min, args.k_max, a, b) for a, b in (args.grid or DEFAULT_GRID)]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if model.has_adapters and args.k_max > max(model.config.adapter_lagging):
        log.warning(
            "k_max=%d exceeds the largest adapter lagging %d; routing clamps to it",
            args.k_max,
            max(model.config.adapter_lagging),
        )
    return configs


def _load(path: Path) -> Checkpoint:
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    model_kw, train_kw = (dict(d) for d in PROFILES[args.profile])
    task = _task_from_args(args)
    if task is None and args.corpus is None:
        raise UsageError("give a synthetic --task or a --corpus to train on")
    if task is not None and args.corpus is not None:
        raise UsageError("--task and --corpus are mutually exclusive")

    if task is not None:
        splits = generate(task)
        train_c, valid_c = splits["train"], splits["valid"]
    else:
        train_c = load_tsv(args.corpus, "train")
        valid_c = load_tsv(args.valid, "valid") if args.valid else ParallelCorpus([], "valid")

    overrides = {
        "adapter_lagging": args.adapter_lagging,
        "adapter_bottleneck": args.bottleneck,
        "adapter_layers": args.adapter_layers,
        "embed_dim": args.embed_dim,
        "ffn_dim": args.ffn_dim,
        "num_layers": args.layers,
        "num_heads": args.heads,
        "dropout": args.dropout,
    }
    model_kw.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_adapters:
        if args.frozen_backbone:
            raise UsageError("--frozen-backbone trains adapters; it cannot be combined with --no-adapters")
        model_kw["adapter_layers"] = ()
    train_kw.update(
        {
            k: v
            for k, v in {
                "lr": args.lr,
                "warmup_updates": args.warmup,
                "max_updates": args.max_updates,
                "max_tokens": args.max_tokens,
                "valid_every": args.valid_every,
            }.items()
            if v is not None
        }
    )
    train_kw["seed"] = args.seed
    if args.fixed_k is not None:
        train_kw.update(fixed_k=args.fixed_k, multipath=False)
    cfg = TrainConfig(**train_kw)

    if args.frozen_backbone:
        base = _load(args.frozen_backbone)
        src_vocab, tgt_vocab = base.src_vocab, base.tgt_vocab
        model = base.model
        if not model.has_adapters:
            raise UsageError("backbone checkpoint has no adapters to train")
        model.config = ModelConfig.from_dict(dict(model.config.to_dict(), backbone_frozen=True))
        model.apply_freeze()
    else:
        src_vocab = Vocabulary.build(train_c.sources())
        tgt_vocab = Vocabulary.build(train_c.targets())
        try:
            mcfg = ModelConfig(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab), **model_kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        model = SimtModel(mcfg, seed=args.seed)

    trainer = Trainer(
        model,
        encode_pairs(train_c, src_vocab, tgt_vocab),
        cfg,
        encode_pairs(valid_c, src_vocab, tgt_vocab) if len(valid_c) else (),
    )

    def checkpoint(t: Trainer) -> Checkpoint:
        return Checkpoint(model, src_vocab, tgt_vocab, task, cfg, t.snapshot(), {"profile": args.profile})

    def periodic(t: Trainer) -> None:
        save_checkpoint(args.out.with_name(f"{args.out.stem}.u{t.state.update}{args.out.suffix}"), checkpoint(t))

    log.info("training %d parameters on %d pairs", model.num_parameters(), len(train_c))
    rows = trainer.run(on_checkpoint=periodic)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, checkpoint(trainer))
    log_path = args.log or args.out.with_name(args.out.name + ".log.tsv")
    with _output(log_path) as fh:
        fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(row.tsv() + "\n")
    return 0


def _write_decodes(folder: Path, name: str, dec) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    safe = name.replace(",", "_")
    (folder / f"{safe}.trace").write_text(format_traces(dec.traces), encoding="utf-8")
    (folder / f"{safe}.hyp").write_text("".join(" ".join(h) + "\n" for h in dec.hypotheses), encoding="utf-8")


def cmd_sweep(args) -> int:
    ckpt = _load(args.checkpoint)
    test = _test_split(args, ckpt)
    model = ckpt.model
    records: list[EvalRecord] = []
    settings: list[tuple[str, str, int | PolicyConfig]] = []
    if args.policy in ("fixed", "both"):
        if min(args.k_list) < 1:
            raise UsageError("k values must be at least 1")
        settings += [("fixed", str(k), k) for k in args.k_list]
    if args.policy in ("adaptive", "both"):
        settings += [("adaptive", c.label, c) for c in _policy_grid(args, model)]
    for kind, label, policy in settings:
        dec = decode_corpus(model, test, ckpt.src_vocab, ckpt.tgt_vocab, policy)
        rec = score(test, dec, kind, label, args.smooth_bleu)
        log.info("%s %s  BLEU %.2f  acc %.3f  AL %.2f", kind, label, rec.BLEU, rec.acc, rec.AL)
        records.append(rec)
        if args.traces_dir:
            _write_decodes(args.traces_dir, f"{kind}-{label}", dec)
    with _output(args.out) as fh:
        write_table(records, fh, timing=not args.no_timing)
    return 0


def cmd_instrument_norms(args) -> int:
    ckpt = _load(args.checkpoint)
    if not ckpt.model.has_adapters:
        raise UsageError("model has no adapters to instrument")
    test = _test_split(args, ckpt)
    configs = _policy_grid(args, ckpt.model)
    layers, labels, mat = norm_matrix(ckpt.model, test, ckpt.src_vocab, ckpt.tgt_vocab, configs)
    with _output(args.out) as fh:
        fh.write("\t".join(["layer", *labels]) + "\n")
        for layer, row in zip(layers, mat):
            fh.write("\t".join([str(layer), *(f"{v:.6f}" for v in row)]) + "\n")
    return 0


TIME_COLUMNS = ("model", "k", "runs", "mean_seconds", "std_seconds")


def _time_model(name: str, ckpt: Checkpoint, test: ParallelCorpus, k: int, runs: int) -> list[str]:
    times = []
    outputs = None
    for _ in range(runs):
        start = time.perf_counter()
        decoded = [fixed_waitk_decode(ckpt.model, ckpt.src_vocab.encode(s), k).tokens for s, _ in test]
        times.append(time.perf_counter() - start)
        if outputs is None:
            outputs = decoded
        elif decoded != outputs:
            raise CommandError(f"{name}: decoding at k={k} changed between runs")
    std = f"{statistics.stdev(times):.6f}" if runs >= 2 else ""
    return [name, str(k), str(runs), f"{statistics.fmean(times):.6f}", std]


def cmd_time(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    if args.runs < 2:
        log.warning("fewer than two runs; standard deviation omitted")
    models = [("adapters", _load(args.checkpoint))]
    if args.baseline:
        models.append(("baseline", _load(args.baseline)))
    test = _test_split(args, models[0][1])
    rows = [_time_model(name, ck, test, k, args.runs) for name, ck in models for k in args.k_list]
    with _output(args.out) as fh:
        fh.write("\t".join(TIME_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    return 0


def cmd_metrics(args) -> int:
    with open(args.traces, encoding="utf-8") as fh:
        traces = parse_traces(fh)
    if not traces:
        raise UsageError(f"{args.traces}: no traces")
    refs = srcs = None
    if args.corpus:
        pairs = load_tsv(args.corpus, "test")
        srcs, refs = pairs.sources(), pairs.targets()
        if len(pairs) != len(traces):
            raise UsageError(f"{len(traces)} traces but {len(pairs)} corpus pairs")
    hyps = None
    if args.hyps:
        with open(args.hyps, encoding="utf-8") as fh:
            hyps = [line.split() for line in fh.read().splitlines()]
        if len(hyps) != len(traces):
            raise UsageError(f"{len(traces)} traces but {len(hyps)} hypotheses")

    schedules = []
    for i, tr in enumerate(traces):
        # without side files, a trace is taken to read and write one end marker each
        src_len = len(srcs[i]) if srcs is not None else tr.reads - 1
        tgt_len = len(hyps[i]) if hyps is not None else tr.writes - 1
        schedules.append(tr.to_schedule(src_len, tgt_len) if tgt_len > 0 else None)

    with _output(args.out) as fh:
        if args.per_sentence:
            fh.write("sentence\tAL\tCW\tAP\tDAL\n")
            for i, s in enumerate(schedules, 1):
                vals = latency(s, strict=False) if s else dict.fromkeys(("AL", "CW", "AP", "DAL"), float("nan"))
                fh.write("\t".join([str(i), *(f"{vals[c]:.4f}" for c in ("AL", "CW", "AP", "DAL"))]) + "\n")
            return 0
        if hyps is not None and refs is not None:
            rep = corpus_report(schedules, hyps, refs, args.smooth_bleu)
            fh.write("BLEU\tacc\tAL\tCW\tAP\tDAL\n")
            fh.write("\t".join(f"{v:.4f}" for v in (rep.BLEU, rep.token_accuracy, rep.AL, rep.CW, rep.AP, rep.DAL)) + "\n")
        else:
            rows = [latency(s, strict=False) for s in schedules if s is not None]
            if not rows:
                raise UsageError("no trace contains a written token")
            fh.write("AL\tCW\tAP\tDAL\n")
            fh.write("\t".join(f"{statistics.fmean(r[c] for r in rows):.4f}" for c in ("AL", "CW", "AP", "DAL")) + "\n")
    return 0


def cmd_generate(args) -> int:
    task = _task_from_args(args)
    if task is None:
        raise UsageError("--task is required")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, corpus in generate(task).items():
        save_tsv(corpus, args.out_dir / f"{name}.tsv")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "instrument-norms": cmd_instrument_norms,
    "time": cmd_time,
    "metrics": cmd_metrics,
    "generate": cmd_generate,
}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, RoutingError) as exc:
        print(f"simtlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, TrainingDiverged, CheckpointError, CorpusError, TraceError, OSError, ValueError) as exc:
        print(f"simtlab {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
