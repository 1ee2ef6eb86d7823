"""Command-line entry point.

Subcommands: gen, train, eval, verify. Exit codes: 0 success, 1 config
error, 2 runtime numeric error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .autodiff import NumericError
from .datagen import DatasetFormatError
from .harness import ConfigError, cmd_eval, cmd_gen, cmd_train, cmd_verify, load_config


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; bad arguments are config errors here
    def error(self, message):
        raise ConfigError([message])


def _build_parser():
    parser = _Parser(prog="pll", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a dataset file pair plus sidecar")
    train = sub.add_parser("train", help="train a model into a run directory")
    for p in (gen, train):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)

    ver = sub.add_parser("verify", help="run the identity/bound verification suite")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--instances", type=int, default=1000)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.command in ("gen", "train"):
            overrides = {} if args.seed is None else {"seed": args.seed}
            config = load_config(args.config, overrides)
            if args.command == "gen":
                sidecar = cmd_gen(config, args.out)
                print(json.dumps(sidecar["stats"], indent=2, sort_keys=True))
            else:
                summary = cmd_train(config, args.out)
                print(json.dumps({k: v for k, v in summary.items() if k != "config"},
                                 indent=2, sort_keys=True))
            return 0
        if args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.dataset),
                             indent=2, sort_keys=True))
            return 0
        report = cmd_verify(seed=args.seed, n_instances=args.instances)
        for line in report.lines():
            print(line)
        if not report.all_passed:
            print("verification FAILED", file=sys.stderr)
            return 3
        return 0
    except (ConfigError, DatasetFormatError, OSError) as err:
        for msg in getattr(err, "errors", [str(err)]):
            print(f"config error: {msg}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
