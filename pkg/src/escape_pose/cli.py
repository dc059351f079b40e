"""Command-line entry point: ``escape-pose {synth,train,eval,correlation,bench}``.

Exit codes: 0 success, 2 argument error, 3 data error, 4 missing or
incompatible prerequisite, 5 training diverged.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import correction, experiments
from .datasets import read_dataset, write_dataset
from .errors import (
    CorruptCheckpointError,
    DataFormatError,
    DependencyError,
    EscapeError,
    IncompatibleCheckpointError,
    InsufficientDataError,
    InvalidPoseError,
    SchemaError,
    SupervisionUnavailableError,
    TrainingDivergedError,
)
from .pose import get_schema
from .reports import write_csv, write_report
from .selector import DEFAULT_THRESHOLD
from .synthgen import CorruptionModel, make_dataset
from .tinynet import load_checkpoint, save_checkpoint
from .tta import TtaConfig

log = logging.getLogger("escape_pose")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_DEPENDENCY, EXIT_DIVERGED = 0, 2, 3, 4, 5


class ArgumentError(Exception):
    pass


def _positive(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escape-pose", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--schema", default="h36m17")
    parser.add_argument("--threads", type=_positive, default=None, help="cap BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train and test files")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=20_000)
    p.add_argument("--n-test", type=int, default=4_000)
    p.add_argument("--ood-fraction", type=float, default=CorruptionModel.ood_fraction)

    p = sub.add_parser("train", help="train CNet or RCNet")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--which", choices=("cnet", "rcnet"), required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--cnet", type=Path, help="trained CNet checkpoint (required for rcnet)")
    p.add_argument("--log", type=Path, help="per-epoch loss CSV (default: <out>.loss.csv)")
    p.add_argument("--recipe", choices=sorted(correction.RECIPES), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden", type=int)

    for name, helptext in (("eval", "run one pipeline arm and write a report"),
                           ("correlation", "self-consistency loss vs true distal error"),
                           ("bench", "per-sample latency of each arm")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--cnet", type=Path)
        p.add_argument("--rcnet", type=Path)
        p.add_argument("--out", type=Path, required=True)
        if name == "correlation":
            p.add_argument("--bins", type=_positive, default=20)
            continue
        if name == "eval":
            p.add_argument("--mode", choices=experiments.MODES, default="escape")
        else:
            p.add_argument("--arms", nargs="+", choices=experiments.MODES, default=list(experiments.MODES))
        p.add_argument("--energy-threshold", type=float, default=DEFAULT_THRESHOLD)
        p.add_argument("--ood-direction", choices=("below", "above"), default="below")
        p.add_argument("--random-rate", type=float, default=None)
        p.add_argument("--tta-steps", type=int, default=TtaConfig.steps)
        p.add_argument("--tta-lr", type=float, default=TtaConfig.learning_rate)
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--episodic", dest="episodic", action="store_true", default=True)
        mode.add_argument("--continual", dest="episodic", action="store_false")
        p.add_argument("--workers", type=_positive, default=1)
    return parser


def _echo(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "verbose"}


def _load(path, role):
    if path is None:
        raise DependencyError(f"--{role} checkpoint is required")
    if not Path(path).exists():
        raise DependencyError(f"{role} checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_synth(args, schema):
    if args.n_train <= 0 or args.n_test <= 0:
        raise ArgumentError("--n-train and --n-test must be positive")
    model = CorruptionModel(ood_fraction=args.ood_fraction, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        path = args.out / f"{split}.jsonl"
        write_dataset(path, make_dataset(n, split, seed=args.seed, corruption=model), schema)
        print(f"wrote {n} {split} records to {path}")


def train_config(args) -> correction.TrainConfig:
    cfg = replace(correction.RECIPES[args.recipe], seed=args.seed)
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
                 "dropout_rate": args.dropout, "hidden_dim": args.hidden}
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args, schema):
    cnet = None
    if args.which == "rcnet":
        # check the prerequisite before spending time on data loading
        cnet = _load(args.cnet, "cnet")
    _, records = read_dataset(args.data, schema)
    cfg = train_config(args)
    log_path = args.log or args.out.with_name(args.out.name + ".loss.csv")
    rows = []

    def on_epoch(epoch, loss):
        rows.append([epoch, loss])
        log.info("epoch %d loss %.4f", epoch, loss)

    try:
        if args.which == "cnet":
            net, _ = correction.train_cnet(records, cfg, schema, on_epoch=on_epoch)
        else:
            net, _ = correction.train_rcnet(records, cnet, cfg, schema, on_epoch=on_epoch)
    finally:
        write_csv(log_path, ["epoch", "loss"], rows)
    save_checkpoint(net, args.out)
    print(f"wrote {args.which} checkpoint to {args.out} (config: {asdict(cfg)})")


def _arm_config(args, mode) -> experiments.ArmConfig:
    tta = TtaConfig(steps=args.tta_steps, learning_rate=args.tta_lr, episodic=args.episodic, workers=args.workers)
    return experiments.ArmConfig(mode, args.energy_threshold, args.ood_direction, args.random_rate, args.seed, tta)


def _nets(args, mode):
    if mode == "baseline":
        return None, None
    cnet = _load(args.cnet, "cnet")
    rcnet = _load(args.rcnet, "rcnet") if mode != "cnet_only" else None
    return cnet, rcnet


def cmd_eval(args, schema):
    cfg = _arm_config(args, args.mode)
    _, records = read_dataset(args.data, schema)
    cnet, rcnet = _nets(args, args.mode)
    echo = _echo(args)
    for role, net in (("cnet", cnet), ("rcnet", rcnet)):
        if net is not None:
            echo[f"{role}_sha256"] = net.checksum()
    report = experiments.evaluate(cfg, cnet, rcnet, records, echo, schema)
    write_report(report, args.out)
    agg = report.aggregate
    print(f"{args.mode}: n={agg['n']} adapted={agg['n_adapted']} distal {agg['distal_pre']:.2f} -> "
          f"{agg['distal_post']:.2f} mm, mean {agg['mean_elapsed_us']:.0f} us/sample")


def cmd_correlation(args, schema):
    _, records = read_dataset(args.data, schema)
    cnet, rcnet = _load(args.cnet, "cnet"), _load(args.rcnet, "rcnet")
    result = experiments.correlation(cnet, rcnet, records, args.bins, schema)
    header, rows = result.csv_rows()
    write_csv(args.out, header, rows)
    r = "n/a" if result.pearson_r is None else f"{result.pearson_r:.3f}"
    print(f"pearson r = {r} over {len(records)} samples")


def cmd_bench(args, schema):
    _, records = read_dataset(args.data, schema)
    needs_rcnet = any(a not in ("baseline", "cnet_only") for a in args.arms)
    needs_cnet = any(a != "baseline" for a in args.arms)
    cnet = _load(args.cnet, "cnet") if needs_cnet else None
    rcnet = _load(args.rcnet, "rcnet") if needs_rcnet else None
    rows = experiments.bench(cnet, rcnet, records, args.arms, _arm_config(args, "escape"), schema=schema)
    write_csv(args.out, ["arm", "path", "count", "mean_us", "p95_us"],
              [[r.arm, r.path, r.count, r.mean_us, r.p95_us] for r in rows])
    for r in rows:
        if r.count:
            print(f"{r.arm:>14} {r.path:>8} n={r.count:<6} mean {r.mean_us:10.1f} us  p95 {r.p95_us:10.1f} us")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "correlation": cmd_correlation, "bench": cmd_bench}

DATA_ERRORS = (DataFormatError, InvalidPoseError, SchemaError, SupervisionUnavailableError,
               InsufficientDataError, OSError)
DEPENDENCY_ERRORS = (DependencyError, IncompatibleCheckpointError, CorruptCheckpointError)


def _fail(exc, code) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        schema = get_schema(args.schema)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            COMMANDS[args.command](args, schema)
    except DEPENDENCY_ERRORS as exc:
        return _fail(exc, EXIT_DEPENDENCY)
    except TrainingDivergedError as exc:
        return _fail(exc, EXIT_DIVERGED)
    except DATA_ERRORS as exc:
        return _fail(exc, EXIT_DATA)
    except (ArgumentError, ValueError) as exc:
        return _fail(exc, EXIT_ARGS)
    except EscapeError as exc:
        return _fail(exc, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
