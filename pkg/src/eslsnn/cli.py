"""``eslsnn`` command line: train, eval, sweep, energy, gen-data.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import container
from .config import ConfigError, load_config
from .datasets import IdxError, save_events, synthetic_events
from .energy import EnergyModel, count_ops, format_report
from .trainer import Checkpoint, TrainingError, evaluate, sweep_epsilon, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eslsnn", description="Evolving sparse spiking network training.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="override the config seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("test", "val", "train"))
    e.add_argument("--data-dir", help="override the dataset root")

    s = sub.add_parser("sweep", help="train across epsilon values and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--epsilon", required=True, type=_float_list)
    s.add_argument("--seeds", type=int, default=3, help="number of seeds per epsilon")
    s.add_argument("--seed", type=int, help="first seed (default: config seed)")
    s.add_argument("--out", help="directory for sweep.csv and per-run outputs")

    n = sub.add_parser("energy", help="op counts and energy estimate of a checkpoint")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--gpu-joules-per-op", type=float, default=EnergyModel().joules_per_op_gpu)
    n.add_argument("--neuromorphic-joules-per-op", type=float,
                   default=EnergyModel().joules_per_op_neuromorphic)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=("synthetic-events",))
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--per-class", type=int, default=200, help="training samples per class")
    g.add_argument("--test-per-class", type=int, default=100)
    g.add_argument("--timesteps", type=int, default=4)
    g.add_argument("--height", type=int, default=8)
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    return p


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    res = train(cfg, out_dir=args.out)
    ck = res.checkpoint
    print(f"best_val_accuracy {ck.best_val_accuracy:.4f} (epoch {ck.epoch})")
    print(f"test_accuracy {res.test_accuracy:.4f}")
    print(f"checkpoint {Path(args.out) / 'checkpoint.esl'}")


def _cmd_eval(args):
    ck = Checkpoint.load(args.checkpoint)
    if args.data_dir:
        ck.config = ck.config.replace(data_dir=args.data_dir)
    res = evaluate(ck, args.split)
    print(f"accuracy {res.accuracy:.4f} on {res.n} {args.split} samples")
    for c, a in enumerate(res.per_class):
        print(f"class {c} {a:.4f}")
    print(f"total_connections {res.ops.total_connections}")


def _cmd_sweep(args):
    cfg = load_config(args.config)
    first = cfg.seed if args.seed is None else args.seed
    seeds = list(range(first, first + args.seeds))
    out = Path(args.out) if args.out else None
    fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "sweep.csv").open("w", encoding="utf-8", newline="")
    writers = [csv.writer(sys.stdout, lineterminator="\n")]
    if fh:
        writers.append(csv.writer(fh, lineterminator="\n"))
    for w in writers:
        w.writerow(["epsilon", "seed", "density", "test_acc"])

    def on_row(r):
        for w in writers:
            w.writerow([f"{r.epsilon:g}", r.seed, f"{r.density:.6f}", f"{r.test_acc:.4f}"])
        if fh:
            fh.flush()

    try:
        sweep_epsilon(cfg, args.epsilon, seeds, out_dir=out, on_row=on_row)
    finally:
        if fh:
            fh.close()


def _cmd_energy(args):
    ck = Checkpoint.load(args.checkpoint)
    model = EnergyModel(args.gpu_joules_per_op, args.neuromorphic_joules_per_op)
    print(format_report(count_ops(ck), model))


def _cmd_gen_data(args):
    n_train, n_test = args.per_class, args.test_per_class
    ds = synthetic_events(n_train + n_test, args.classes, args.timesteps, args.height,
                          args.width, seed=args.seed, noise=args.noise)
    meta = {"n_test": args.classes * n_test, "n_classes": args.classes, "seed": args.seed,
            "noise": args.noise}
    save_events(args.out, ds, meta)
    print(f"wrote {len(ds)} samples of shape {tuple(ds.samples.shape[1:])} to {args.out}")


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "energy": _cmd_energy,
    "gen-data": _cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("eslsnn: error: a subcommand is required")
    except UsageError as exc:
        if not argv:
            parser.print_help(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](args)
    except (OSError, ConfigError, container.ContainerError, IdxError, TrainingError,
            ValueError) as exc:
        print(f"eslsnn {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
