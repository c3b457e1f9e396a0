"""Exporter CLI: synth-digits / train / export / verify."""

from __future__ import annotations

import argparse
import json
import sys

from .digits import write_dataset
from .export import export_bundle, verify_bundle
from .train import AccuracyBelowTarget, train_reference_model


def _cmd_synth_digits(args) -> int:
    meta = write_dataset(args.out, args.train, args.test, args.seed, args.size)
    print(json.dumps(meta))
    return 0


def _cmd_train(args) -> int:
    try:
        results = train_reference_model(
            args.arch,
            args.data,
            seed=args.seed,
            epochs=args.epochs,
            out_dir=args.out,
            folds=args.folds,
            min_accuracy=args.min_accuracy,
            batch_size=args.batch_size,
            lr=args.lr,
        )
    except AccuracyBelowTarget as exc:
        print(f"fga-export: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"fga-export: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(results))
    return 0


def _cmd_export(args) -> int:
    meta = export_bundle(args.checkpoint, args.out, data_dir=args.data, name=args.name)
    print(json.dumps(meta))
    return 0


def _cmd_verify(args) -> int:
    try:
        facts = verify_bundle(args.bundle)
    except (ValueError, FileNotFoundError) as exc:
        print(f"fga-export: bundle invalid: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(facts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fga-export",
        description="Produce trained-network fixtures in the FGA-MF v1 format.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-digits", help="write a synthetic digit IDX dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=20000)
    p.add_argument("--test", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=28)
    p.set_defaults(func=_cmd_synth_digits)

    p = sub.add_parser("train", help="train a reference network")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True, help="directory from synth-digits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--min-accuracy", type=float, default=0.985)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("export", help="convert a checkpoint to an FGA-MF bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset dir for the probe transcript")
    p.add_argument("--name", default=None)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("verify", help="self-check a bundle")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
