"""Command-line entry points.

Subcommands: gen-tasks, pretrain, sweep, meta-train, report.  Each takes
--config <path> (YAML over defaults), --seed <int> (overrides the command's
seed knob) and --out <dir> (the workspace holding task files, checkpoints,
traces and CSVs).  Exit code 0 on success; failures print one structured
JSON diagnostic line to stderr and exit nonzero.
"""

import argparse
import json
import sys

from . import harness
from .config import load_config

_SEED_KNOB = {
    "gen-tasks": ("tasks", "seed"),
    "pretrain": ("pretrain", "seed"),
    "meta-train": ("meta", "seed"),
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="ttlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("gen-tasks", "generate train/eval task files"),
        ("pretrain", "pretrain the toy model on the task corpus"),
        ("sweep", "run method x budget x seed over the greedy-failure subset"),
        ("meta-train", "train the update predictor on sampled failures"),
        ("report", "aggregate sweep CSVs into mean/std summaries"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default=None, help="YAML config merged over defaults")
        p.add_argument("--seed", type=int, default=None, help="override the command's seed")
        p.add_argument("--out", required=True, help="workspace directory")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.command == "sweep":
                cfg["sweep"]["seeds"] = [args.seed]
            elif args.command in _SEED_KNOB:
                section, key = _SEED_KNOB[args.command]
                cfg[section][key] = args.seed
        if args.command == "gen-tasks":
            train_path, eval_path = harness.generate_tasks(cfg, args.out)
            print(f"wrote {train_path} and {eval_path}")
        elif args.command == "pretrain":
            ckpt = harness.pretrain(cfg, args.out)
            print(f"wrote {ckpt}")
        elif args.command == "sweep":
            agg = harness.run_sweep(cfg, args.out)
            print(f"wrote {agg}")
        elif args.command == "meta-train":
            ppath, history = harness.run_meta_train(cfg, args.out)
            print(f"wrote {ppath} (mean loss {history[0]:.4f} -> {history[-1]:.4f})")
        elif args.command == "report":
            harness.report(args.out)
    except (harness.HarnessError, ValueError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
