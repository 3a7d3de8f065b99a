"""Command-line surface: train, eval, profile, bench, trace and export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Settings resolve as flags > ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from edgecnn.builder import ModelConfig, Variant, build
from edgecnn.checkpoint import (
    export_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from edgecnn.config import load_config_file, parse_bool, parse_int_tuple
from edgecnn.data import (
    DatasetSplits,
    Expression,
    Split,
    generate_synthetic,
    load_fer2013,
    load_raf_db,
    load_synthetic,
)
from edgecnn.errors import (
    CheckpointFormatError,
    CheckpointMismatchError,
    DataError,
    EdgeCNNError,
    UsageError,
)
from edgecnn.facade import trace_table
from edgecnn.model import Model, shape_trace
from edgecnn.nnops import set_num_threads
from edgecnn.profile import (
    DEFAULT_GROUPED_SHAPES,
    bench_forward,
    bench_grouped_vs_dense,
    cost_report,
)
from edgecnn.tensor import Precision
from edgecnn.train import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

ARCHES = ("edgecnn", "edgecnn-g")
DATASETS = ("fer2013", "rafdb", "synthetic")

type Handler = Callable[[argparse.Namespace], int]


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports errors as :class:`UsageError`."""

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        self.commands: dict[str, _Parser] = {}
        self.flag_actions: dict[str, argparse.Action] = {}
        super().__init__(*args, **kwargs)

    def add_argument(self, *args: Any, **kwargs: Any) -> argparse.Action:
        action = super().add_argument(*args, **kwargs)
        self.flag_actions[action.dest] = action
        return action

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: _Parser) -> None:
    parser.add_argument("--config", type=Path, help="key = value settings file")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--threads", type=int, default=1, help="kernel thread cap")
    parser.add_argument(
        "--format", choices=("text", "json"), default="text", help="report format"
    )
    verbosity = parser.add_mutually_exclusive_group()
    for action in (
        verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging"),
        verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only"),
    ):
        parser.flag_actions[action.dest] = action


def _add_arch(parser: _Parser) -> None:
    parser.add_argument("--arch", choices=ARCHES, default="edgecnn", help="architecture")
    parser.add_argument("--growth-rate", type=int, help="override the growth rate")
    parser.add_argument("--blocks", help="override block lengths, e.g. 4,4,7")
    parser.add_argument(
        "--precision", choices=[p.value for p in Precision], default="f32", help="element type"
    )


def _add_data(parser: _Parser) -> None:
    parser.add_argument("--dataset", choices=DATASETS, default="synthetic", help="dataset")
    parser.add_argument(
        "--data-dir", type=Path, help="FER-2013 csv (or its folder), RAF-DB root or fixture dir"
    )


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="edgecnn", description="EdgeCNN training, evaluation and cost profiling."
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = argparse.ArgumentDefaultsHelpFormatter

    def command(name: str, help_text: str, handler: Handler) -> _Parser:
        sub = subparsers.add_parser(name, help=help_text, formatter_class=defaults)
        assert isinstance(sub, _Parser)
        sub.set_defaults(handler=handler)
        parser.commands[name] = sub
        _add_common(sub)
        return sub

    train_cmd = command("train", "train a model", _run_train)
    _add_arch(train_cmd)
    _add_data(train_cmd)
    train_cmd.add_argument("--out", type=Path, help="directory for metrics and checkpoints")
    train_cmd.add_argument("--epochs", type=int, default=120, help="total epochs")
    train_cmd.add_argument("--batch-size", type=int, default=128, help="batch size")
    train_cmd.add_argument("--lr", type=float, default=1e-2, help="base learning rate")
    train_cmd.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    train_cmd.add_argument("--weight-decay", type=float, default=5e-4, help="weight decay")

    eval_cmd = command("eval", "ten-crop accuracy of a checkpoint", _run_eval)
    _add_data(eval_cmd)
    eval_cmd.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    eval_cmd.add_argument(
        "--split", choices=[s.value for s in Split], default="test", help="split to evaluate"
    )
    eval_cmd.add_argument(
        "--random-crops", action="store_true", help="random crop offsets instead of fixed ones"
    )

    profile_cmd = command("profile", "parameter, MAC and memory report", _run_profile)
    _add_arch(profile_cmd)
    profile_cmd.add_argument("--checkpoint", type=Path, help="profile a trained checkpoint")
    profile_cmd.add_argument("--out", type=Path, help="also write the report here")
    profile_cmd.add_argument(
        "--runs", type=int, default=0, help="timed forward runs to include (0 = none)"
    )
    profile_cmd.add_argument(
        "--assume-condensed",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="count learned group convolutions as fully condensed",
    )

    bench_cmd = command("bench", "forward latency and grouped-vs-dense timings", _run_bench)
    _add_arch(bench_cmd)
    bench_cmd.add_argument("--runs", type=int, default=30, help="timed runs per measurement")
    bench_cmd.add_argument(
        "--what", choices=("forward", "grouped", "all"), default="all", help="benchmarks to run"
    )
    bench_cmd.add_argument("--out", type=Path, help="also write the report here")

    trace_cmd = command("trace", "per-stage output shapes", _run_trace)
    _add_arch(trace_cmd)
    trace_cmd.add_argument("--detailed", action="store_true", help="one row per layer")

    export_cmd = command("export", "rewrite a condensed checkpoint", _run_export)
    export_cmd.add_argument("--checkpoint", type=Path, required=True, help="source checkpoint")
    export_cmd.add_argument("--out", type=Path, required=True, help="destination checkpoint")
    export_cmd.add_argument(
        "--grouped", action="store_true", help="pack learned group convolutions"
    )
    return parser


def _config_path(argv: Sequence[str]) -> Path | None:
    pre = _Parser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(list(argv))
    path: Path | None = known.config
    return path


def _apply_config_file(sub: _Parser, command: str, path: Path) -> None:
    """Install settings from ``path`` as defaults of subcommand ``sub``."""
    try:
        values = load_config_file(path)
    except OSError as exc:
        raise DataError(f"cannot read config file: {exc.strerror}", path=path) from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    defaults: dict[str, object] = {}
    for raw_key, raw in values.items():
        key = raw_key.replace("-", "_")
        action = sub.flag_actions.get(key)
        if action is None or key in {"config", "help"}:
            raise UsageError(f"{path}: unknown setting for '{command}': {raw_key!r}")
        if action.nargs == 0:
            try:
                value: object = parse_bool(raw, key=raw_key)
            except ValueError as exc:
                raise UsageError(f"{path}: {exc}") from exc
        elif action.type is not None and callable(action.type):
            try:
                value = action.type(raw)
            except (TypeError, ValueError):
                raise UsageError(f"{path}: invalid value for {raw_key}: {raw!r}") from None
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {raw_key} must be one of {list(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _build_parser()
    config = _config_path(argv)
    command = next((arg for arg in argv if arg in parser.commands), None)
    if config is not None and command is not None:
        _apply_config_file(parser.commands[command], command, config)
    return parser.parse_args(list(argv))


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def run(argv: Sequence[str]) -> int:
    """Parse ``argv``, dispatch to the subcommand and map errors to exit codes."""
    try:
        args = parse_args(argv)
        _configure_logging(args)
        _validate_counts(args)
        set_num_threads(args.threads)
        logger.debug("running %s with %d thread(s)", args.command, args.threads)
        handler: Handler = args.handler
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointFormatError, CheckpointMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {_describe_os_error(exc)}", file=sys.stderr)
        return EXIT_DATA
    except EdgeCNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError, ArithmeticError) as exc:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


# --- helpers -----------------------------------------------------------------


def _validate_counts(args: argparse.Namespace) -> None:
    for name in ("threads", "epochs", "batch_size", "growth_rate"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1: {value}")
    runs = getattr(args, "runs", None)
    if runs is not None and runs < 0:
        raise UsageError(f"--runs must be >= 0: {runs}")
    seed = getattr(args, "seed", None)
    if seed is not None and seed < 0:
        raise UsageError(f"--seed must be >= 0: {seed}")


def _describe_os_error(exc: OSError) -> str:
    reason = exc.strerror or str(exc)
    return f"{exc.filename}: {reason}" if exc.filename else reason


def _model_config(args: argparse.Namespace) -> ModelConfig:
    config = ModelConfig.for_arch(args.arch)
    changes: dict[str, Any] = {}
    if args.growth_rate is not None:
        changes["growth_rate"] = args.growth_rate
    if args.blocks is not None:
        try:
            changes["block_lengths"] = parse_int_tuple(args.blocks, key="--blocks")
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not changes:
        return config
    try:
        return config.with_overrides(**changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid architecture override: {exc}") from exc


def _build_model(args: argparse.Namespace) -> Model:
    return build(_model_config(args), seed=args.seed, dtype=Precision(args.precision).dtype)


def _require_path(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.exists():
        raise DataError(f"{flag} does not exist", path=path)
    return path


def _load_datasets(args: argparse.Namespace) -> DatasetSplits:
    if args.dataset == "synthetic":
        if args.data_dir is None:
            return generate_synthetic(seed=args.seed)
        return load_synthetic(_require_path(args.data_dir, "--data-dir"))
    root = _require_path(args.data_dir, "--data-dir")
    if args.dataset == "fer2013":
        return load_fer2013(root / "fer2013.csv" if root.is_dir() else root)
    return load_raf_db(root)


def _emit(text: str, out: Path | None = None) -> None:
    sys.stdout.write(text if text.endswith("\n") else f"{text}\n")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


# --- subcommands -------------------------------------------------------------


def _run_train(args: argparse.Namespace) -> int:
    datasets = _load_datasets(args)
    try:
        config = TrainConfig(
            base_lr=args.lr,
            weight_decay=args.weight_decay,
            momentum=args.momentum,
            batch_size=args.batch_size,
            total_epochs=args.epochs,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = _build_model(args)
    result = train(model, datasets, config, out_dir=args.out)
    if args.format == "json":
        rows = [metrics.as_row() for metrics in result.history]
        _emit(json.dumps({"history": rows, "best_val_acc": result.best_val_acc}, indent=2))
    else:
        lines = ["epoch  lr          train_loss  train_acc  val_acc"]
        lines.extend(
            f"{m.epoch:>5}  {m.lr:<10.3g}  {m.train_loss:>10.4f}  {m.train_acc:>9.4f}  "
            f"{m.val_acc:>7.4f}"
            for m in result.history
        )
        lines.append(f"best val_acc {result.best_val_acc:.4f}")
        _emit("\n".join(lines))
    return EXIT_OK


def _run_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(_require_path(args.checkpoint, "--checkpoint"))
    datasets = _load_datasets(args)
    images = datasets.split(args.split)
    if not images:
        raise DataError(f"split {args.split!r} is empty")
    model = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed) if args.random_crops else None
    result = evaluate(
        model, images, ckpt.normalization, rng=rng, random_crops=args.random_crops
    )
    if args.format == "json":
        payload = {
            "accuracy": result.accuracy,
            "total": result.total,
            "confusion": result.confusion.tolist(),
        }
        _emit(json.dumps(payload, indent=2))
        return EXIT_OK
    names = [e.name.lower()[:8] for e in Expression]
    lines = [f"accuracy {result.accuracy:.4f} ({result.total} images)", ""]
    lines.append(f"{'true/pred':<10}" + "".join(f"{name:>9}" for name in names))
    for name, row in zip(names, result.confusion, strict=True):
        lines.append(f"{name:<10}" + "".join(f"{int(v):>9}" for v in row))
    _emit("\n".join(lines))
    return EXIT_OK


def _run_profile(args: argparse.Namespace) -> int:
    if args.checkpoint is not None:
        ckpt = load_checkpoint(_require_path(args.checkpoint, "--checkpoint"))
        model = model_from_checkpoint(ckpt)
    else:
        model = _build_model(args)
    grouped = model.config.variant is Variant.GROUPED
    timing = bench_forward(model, runs=args.runs, threads=args.threads) if args.runs else None
    report = cost_report(model, condensed=grouped and args.assume_condensed, timing=timing)
    _emit(report.to_json() if args.format == "json" else report.to_text(), args.out)
    return EXIT_OK


def _run_bench(args: argparse.Namespace) -> int:
    if args.runs < 1:
        raise UsageError(f"--runs must be >= 1 for bench: {args.runs}")
    payload: dict[str, Any] = {}
    lines: list[str] = []
    if args.what in {"forward", "all"}:
        stats = bench_forward(_build_model(args), runs=args.runs, threads=args.threads)
        payload["forward"] = {
            "arch": args.arch,
            "median_ms": stats.median_ms,
            "p10_ms": stats.p10_ms,
            "p90_ms": stats.p90_ms,
            "fps": stats.fps,
            "runs": stats.runs,
            "threads": stats.threads,
            "cpu": stats.cpu,
        }
        lines.extend(
            [
                f"forward {args.arch}: median {stats.median_ms:.3f} ms "
                f"(p10 {stats.p10_ms:.3f}, p90 {stats.p90_ms:.3f}), {stats.fps:.2f} fps",
                f"runs {stats.runs}, threads {stats.threads}, cpu {stats.cpu}",
                "",
            ]
        )
    if args.what in {"grouped", "all"}:
        rows = bench_grouped_vs_dense(DEFAULT_GROUPED_SHAPES, runs=args.runs, threads=args.threads)
        payload["grouped"] = [
            {
                "in": r.in_channels,
                "out": r.out_channels,
                "h": r.height,
                "w": r.width,
                "groups": r.groups,
                "macs": r.macs,
                "bytes": r.bytes_touched,
                "intensity": r.intensity,
                "median_ms": r.median_ms,
                "time_ratio": r.time_ratio,
            }
            for r in rows
        ]
        lines.append(
            f"{'in':>4} {'out':>4} {'hw':>6} {'g':>2} {'macs':>11} {'bytes':>9} "
            f"{'mac/byte':>8} {'ms':>8} {'t/t(g=1)':>8}"
        )
        lines.extend(
            f"{r.in_channels:>4} {r.out_channels:>4} {f'{r.height}x{r.width}':>6} {r.groups:>2} "
            f"{r.macs:>11,} {r.bytes_touched:>9,} {r.intensity:>8.3f} {r.median_ms:>8.3f} "
            f"{r.time_ratio:>8.3f}"
            for r in rows
        )
    text = json.dumps(payload, indent=2) if args.format == "json" else "\n".join(lines)
    _emit(text, args.out)
    return EXIT_OK


def _run_trace(args: argparse.Namespace) -> int:
    customized = args.growth_rate is not None or args.blocks is not None
    if args.detailed or customized or args.precision != "f32":
        rows = shape_trace(_build_model(args), detailed=args.detailed)
    else:
        rows = trace_table(args.arch)
    if args.format == "json":
        payload = [
            {"name": r.name, "operator": r.operator, "shape": r.table_shape} for r in rows
        ]
        _emit(json.dumps(payload, indent=2))
        return EXIT_OK
    width = max(len(r.name) for r in rows)
    op_width = max(len(r.operator) for r in rows)
    _emit("\n".join(f"{r.name:<{width}}  {r.operator:<{op_width}}  {r.table_shape}" for r in rows))
    return EXIT_OK


def _run_export(args: argparse.Namespace) -> int:
    if not args.grouped:
        raise UsageError("export needs --grouped")
    ckpt = load_checkpoint(_require_path(args.checkpoint, "--checkpoint"))
    exported = export_checkpoint(ckpt)
    save_checkpoint(exported, args.out)
    _emit(f"wrote grouped checkpoint {args.out}")
    return EXIT_OK
