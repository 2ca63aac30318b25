"""Command line entry point.

Subcommands: synth-gen, pretrain, finetune, eval, report. Exits 0 on success;
on failure prints a single line `ERROR <category>: <detail>` to stderr and
exits nonzero.
"""

import argparse
import sys
from dataclasses import replace

from .errors import PipelineError
from .pipeline import (RunConfig, load_config, run_eval, run_finetune,
                       run_pretrain, run_report_grid, run_synth_gen)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise PipelineUsage(message)


class PipelineUsage(PipelineError):
    category = "bad-args"


def _add_common(p):
    p.add_argument("--config", help="JSON config file; keys mirror RunConfig fields")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--data", help="override the dataset root")


def build_parser():
    parser = _Parser(prog="scenevox",
                     description="Scene-completion pretraining and 3D detection runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")

    p = sub.add_parser("pretrain", help="train the scene-completion model")
    _add_common(p)

    p = sub.add_parser("finetune", help="train the detector on a labeled fraction")
    _add_common(p)
    p.add_argument("--fraction", type=float, help="labeled fraction in (0, 1]")
    p.add_argument("--init", choices=("scp", "random"), default=None,
                   help="backbone init: scp (from checkpoint) or random")
    p.add_argument("--checkpoint", help="completion checkpoint for scp init")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("completion", "detection"), required=True)

    p = sub.add_parser("report", help="fraction x init experiment grid")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="completion checkpoint used for the scp rows")
    return parser


def _load_run_config(args, mode):
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {"mode": mode}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        over["dataset_root"] = args.data
    if getattr(args, "fraction", None) is not None:
        over["fraction"] = args.fraction
    return replace(cfg, **over)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_run_config(args, args.command)
        if args.command == "synth-gen":
            result = run_synth_gen(cfg, args.scenes)
            print(f"wrote {result['meta']['n_scenes']} scenes to {result['root']}")
        elif args.command == "pretrain":
            result = run_pretrain(cfg)
            print(f"best completion IoU {result['best_iou']:.4f} "
                  f"(epoch {result['best_epoch']}); report: {result['report']}")
        elif args.command == "finetune":
            checkpoint = args.checkpoint
            if args.init == "random":
                checkpoint = None
            elif args.init == "scp" and checkpoint is None:
                raise PipelineUsage("--init scp requires --checkpoint")
            result = run_finetune(cfg, checkpoint)
            print(f"{result['init']} fine-tune on {result['n_train_frames']} frames; "
                  f"report: {result['report']}")
        elif args.command == "eval":
            result = run_eval(cfg, args.checkpoint, args.task)
            print(f"report: {result['report']}; dumps: {result['dumps']}")
        elif args.command == "report":
            result = run_report_grid(cfg, args.checkpoint)
            print(f"report grid: {result['report']}")
        return 0
    except PipelineUsage as e:
        print(f"ERROR bad-args: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"ERROR {e.category}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"ERROR invalid-input: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
