"""Command line: ``cnds probe|train|eval|strip``.

Exit codes: 0 success, 2 usage or configuration error, 3 training
divergence, 4 I/O or checkpoint error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import network as nw
from .config import ConfigError, load_config, load_data
from .data import IDXError
from .evaluation import CheckpointError, load_checkpoint, save_checkpoint, strip_branches
from .supervision import DEFAULT_THRESHOLD, ProbeConfig, probe_vanishing
from .trainer import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _iters(text):
    value = int(text)
    if not 1 <= value <= 1000:
        raise argparse.ArgumentTypeError("--iters must lie in 1..1000")
    return value


def _config(path):
    try:
        cfg = load_config(path)
        data, val = load_data(cfg)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return cfg, data, val


def cmd_probe(args):
    cfg, data, _ = _config(args.config)
    t = cfg.train
    probe_cfg = ProbeConfig(
        iterations=args.iters, threshold=args.threshold, batch_size=t.batch_size,
        seed=t.seed, learning_rate=t.learning_rate, momentum=t.momentum,
        weight_decay=t.weight_decay, init_std=t.init_std, spacing=args.spacing,
    )
    report = probe_vanishing(cfg.spec.without_branches(), data, probe_cfg)
    report.to_csv(args.out)
    for block, value in zip(report.blocks, report.final):
        mark = "  <- below threshold" if value < report.threshold else ""
        print(f"{block}: {value:.3e}{mark}")
    points = report.recommended_attach_points
    print("recommended attach points: " + (", ".join(points) if points else "none"))
    return EXIT_OK


def cmd_train(args):
    cfg, data, val = _config(args.config)
    try:
        params, metrics = train(cfg.spec, data, val, cfg.train, snapshot_path=args.out)
    except TrainingDiverged as exc:
        print(f"error: training diverged at epoch {exc.epoch}, batch {exc.batch}", file=sys.stderr)
        return EXIT_DIVERGED
    input_shape = data.image_shape
    if cfg.train.crop:
        input_shape = (input_shape[0], cfg.train.crop, cfg.train.crop)
    last = metrics.rows[-1] if metrics.rows else {"epoch": -1, "alpha": 0.0}
    save_checkpoint(args.out, cfg.spec, params,
                    {"epoch": last["epoch"], "alpha": last["alpha"], "seed": cfg.train.seed},
                    input_shape=input_shape)
    if args.metrics:
        metrics.to_csv(args.metrics)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args):
    spec, params, meta = load_checkpoint(args.checkpoint)
    cfg, data, val = _config(args.config)
    dataset = val if val is not None else data
    if spec.branches:
        spec, params = strip_branches(spec, params)
        print("note: auxiliary branches stripped before evaluation")
    crop = cfg.train.crop
    try:
        network = nw.build(spec, meta["input"])
        top1, top5 = evaluate(network, params, dataset, crop)
    except (ValueError, KeyError) as exc:
        print(f"error: checkpoint does not fit the dataset: {exc}", file=sys.stderr)
        return EXIT_USAGE
    k = network.num_classes()
    if k < 5:
        print(f"note: only {k} classes; top5_err reports top-{k} error")
    if crop:
        print(f"note: single center crop of {crop}")
    print(f"top1_err={top1:.5g} top5_err={top5:.5g}")
    return EXIT_OK


def cmd_strip(args):
    spec, params, meta = load_checkpoint(args.input)
    before = params.count()
    if not spec.branches:
        print("note: checkpoint has no auxiliary branches")
    spec, params = strip_branches(spec, params)
    save_checkpoint(args.output, spec, params, meta, input_shape=meta["input"])
    print(f"removed {before - params.count()} parameters")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="cnds", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="measure per-layer gradient magnitudes")
    p.add_argument("config")
    p.add_argument("--iters", type=_iters, default=30)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--spacing", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1/top-5 error of the main head")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("strip", help="remove auxiliary branches from a checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_strip)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, nw.SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IDXError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
