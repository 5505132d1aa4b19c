"""``noisytail`` command line: synth, train, eval, sweep, report.

Every config key is also a flag (``--lr0 0.01``, ``--no-opp``); a config file
given with ``--config`` sits between the defaults and the flags.

Exit codes: 0 success, 2 validation error, 3 training error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as C
from . import pipeline as P
from .data import ConfigError, IDXError
from .eval_report import summary_json
from .model import WeightsError
from .trainer import TrainingError

EXIT_OK, EXIT_INVALID, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("config keys")
    for name, field in C.FIELDS.items():
        flag = "--" + name.replace("_", "-")
        help_ = f"{C.KEY_HELP.get(name, '')} (default: {C.format_value(field.default)})"
        if isinstance(field.default, bool):
            g.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_)
        else:
            g.add_argument(flag, dest=name, default=None, metavar=name.upper(), help=help_)


def build_parser():
    parser = argparse.ArgumentParser(prog="noisytail", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="build a long-tailed noisy dataset directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train every seed and write metrics, checkpoints and summaries")
    _add_config_flags(p)
    p.add_argument("--method", choices=sorted(C.METHODS), help="preset for caug_matching/lnor/opp")
    p.add_argument("--resume", action="store_true", help="continue from each seed's checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help="stop each seed after this many new epochs")

    p = sub.add_parser("eval", help="evaluate a seed run directory's checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--data", default=None, help="dataset directory (default: the one the run used)")

    p = sub.add_parser("sweep", help="train a grid of configurations")
    _add_config_flags(p)
    p.add_argument("--method", choices=sorted(C.METHODS))
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="grid axis; repeatable")

    p = sub.add_parser("report", help="tabulate summaries of one or more run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return parser


def resolve_config(args):
    file_values = C.load_file(args.config) if args.config else {}
    flags = {}
    for name in C.FIELDS:
        v = getattr(args, name, None)
        if v is None:
            continue
        flags[name] = v if isinstance(v, bool) else C.parse_value(name, v)
    return C.resolve(file_values, flags, getattr(args, "method", None))


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.verb == "synth":
        cfg = resolve_config(args)
        out, train, test = P.synth(cfg)
        print(json.dumps({"data": str(out), "train_class_counts": train.class_counts.tolist(),
                          "noise_fraction": float(train.noise_mask.mean()), "n_test": len(test)}))
    elif args.verb == "train":
        cfg = resolve_config(args)
        summary = P.train_run(cfg, resume=args.resume, stop_after=args.stop_after)
        print(P.format_report([{"run": cfg.out, **_flatten(summary)}]))
    elif args.verb == "eval":
        print(summary_json(P.evaluate(args.run_dir, args.data)), end="")
    elif args.verb == "sweep":
        cfg = resolve_config(args)
        rows = P.sweep(cfg, P.parse_grid(args.grid))
        failed = sum(r["status"] != "ok" for r in rows)
        print(f"{len(rows)} runs, {failed} failed; aggregate in {cfg.out}/sweep.csv")
    elif args.verb == "report":
        rows = P.report(args.run_dirs)
        print(summary_json(rows) if args.json else P.format_report(rows), end="\n" if not args.json else "")
    return EXIT_OK


def _flatten(summary):
    out = {}
    for key, m in summary["metrics"].items():
        out[key] = m["mean"]
        out[key + "_sd"] = m["stdev"]
    return out


def main(argv=None):
    try:
        return run(argv)
    except (IDXError, WeightsError, OSError) as exc:
        print(f"noisytail: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"noisytail: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, ValueError) as exc:
        print(f"noisytail: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
