"""Command line: ``hipama {gen-synthetic,train,eval,inspect-attention}``.

Exit status is 0 on success, 2 on invalid input (flags, config, data,
checkpoint compatibility) and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, generate_synthetic, load_dataset, write_dataset
from .inspection import attention_tables, format_tables
from .metrics import evaluate
from .model import ConfigError, ModelConfig
from .tensor import ShapeError
from .train import RunConfig, TrainingError, run

log = logging.getLogger("hipama")

VALIDATION_ERRORS = (DataError, ConfigError, CheckpointError, ShapeError)


class UsageError(ValueError):
    pass


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hipama", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    gen.add_argument("--n", type=int, required=True, help="number of utterances")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one model per seed")
    tr.add_argument("--config", help="JSON run config; flags override it")
    tr.add_argument("--train", dest="train_path")
    tr.add_argument("--valid", dest="valid_path")
    tr.add_argument("--test", dest="test_path")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--seeds", type=_seeds)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--no-hierarchy", action="store_true")
    tr.add_argument("--no-multi-aspect", action="store_true")
    tr.add_argument("--max-len", type=int)
    tr.add_argument("--out")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--batch-size", type=int, default=25)
    ev.add_argument("--out")

    ins = sub.add_parser("inspect-attention", help="mean multi-aspect attention weights")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--data", required=True)
    ins.add_argument("--batch-size", type=int, default=25)
    ins.add_argument("--out")
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    cfg = RunConfig.from_dict(base)
    model = cfg.model.to_dict()
    if args.no_hierarchy:
        model["hierarchical"] = False
    if args.no_multi_aspect:
        model["multi_aspect_attention"] = False
    if args.max_len is not None:
        model["max_len"] = args.max_len
    cfg.model = ModelConfig.from_dict(model)
    for flag, attr in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                       ("train_path", "train_path"), ("valid_path", "valid_path"),
                       ("test_path", "test_path"), ("out", "out_dir")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, attr, value)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    elif args.seed is not None:
        cfg.seeds = [args.seed]
    cfg.validate()
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_synthetic(args) -> None:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    write_dataset(generate_synthetic(args.n, args.seed, args.noise), args.out)


def cmd_train(args) -> None:
    cfg = resolve_run_config(args)
    result = run(cfg)
    if result["summary"]:
        for name, (mean, std) in result["summary"].items():
            print(f"{name}\t{mean:.4f}\t±{std:.4f}")


def cmd_eval(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, n_phones=model.config.n_phones, max_len=model.config.max_len)
    if not samples:
        raise DataError(f"{args.data}: empty dataset")
    _emit(evaluate(model, samples, args.batch_size).to_text(), args.out)


def cmd_inspect_attention(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    if not model.config.multi_aspect_attention:
        raise ConfigError("checkpoint has no multi-aspect attention (trained with --no-multi-aspect)")
    samples = load_dataset(args.data, n_phones=model.config.n_phones, max_len=model.config.max_len)
    if not samples:
        raise DataError(f"{args.data}: empty dataset")
    tables = attention_tables(model, samples, args.batch_size)
    aspects = {"word": model.config.aspects_word, "utterance": model.config.aspects_utt}
    _emit(format_tables(tables, aspects), args.out)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-attention": cmd_inspect_attention,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"hipama {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"hipama {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
