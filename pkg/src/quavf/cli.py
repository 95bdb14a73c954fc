"""Command line entry point: ``quavf <command> --config <path> [...]``.

Commands: synth, quality, train, predict, fuse, eval, report, all.  Usage
errors exit with status 2 (argparse's convention); pipeline failures exit
with status 1 and name the failing stage.  The QUAVF_WORKDIR environment
variable overrides the configured work directory.
"""
from __future__ import annotations

import argparse
import sys

from . import pipeline
from .blocks import configure_numerics
from .errors import QuavfError


def _odd_window(text: str) -> int:
    value = int(text)
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"window must be odd and >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quavf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a dotted config key, e.g. --set quality.tau=0.5",
        )
        p.add_argument("--seed", type=int, help="override the pipeline seed")

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    common(sub.add_parser("quality", help="compute face-quality tracks"))

    train = sub.add_parser("train", help="train a model")
    common(train)
    train.add_argument("--model", choices=pipeline.MODEL_NAMES, help="default: all models")

    predict = sub.add_parser("predict", help="write per-frame score tracks")
    common(predict)
    predict.add_argument("--model", choices=pipeline.MODEL_NAMES, help="default: all models")

    common(sub.add_parser("fuse", help="quality-weighted fusion of branch scores"))

    ev = sub.add_parser("eval", help="accuracy and mAP, with and without smoothing")
    common(ev)
    ev.add_argument("--model", choices=pipeline.EVAL_NAMES, help="default: all with scores")
    ev.add_argument("--window", type=_odd_window, help="smoothing window override")
    ev.add_argument("--threshold", type=float, help="accuracy threshold override")

    common(sub.add_parser("report", help="print the model comparison table"))
    common(sub.add_parser("all", help="run the whole pipeline"))
    return parser


def _run(args: argparse.Namespace) -> int:
    cfg = pipeline.load_config(args.config, args.overrides, args.seed)
    stage = args.command
    try:
        with pipeline.WorkDirLock(cfg.work_dir):
            if args.command == "synth":
                print(pipeline.stage_synth(cfg))
            elif args.command == "quality":
                pipeline.stage_quality(cfg)
            elif args.command == "train":
                for name in [args.model] if args.model else pipeline.MODEL_NAMES:
                    stage = f"train {name}"
                    pipeline.stage_train(cfg, name)
            elif args.command == "predict":
                for name in [args.model] if args.model else pipeline.MODEL_NAMES:
                    stage = f"predict {name}"
                    pipeline.stage_predict(cfg, name)
            elif args.command == "fuse":
                pipeline.stage_fuse(cfg)
            elif args.command == "eval":
                names = [args.model] if args.model else [
                    n for n in pipeline.EVAL_NAMES if cfg.scores_path(n).exists()
                ]
                if not names:
                    raise QuavfError("no score files to evaluate; run `quavf predict` first")
                for name in names:
                    stage = f"eval {name}"
                    reports = pipeline.stage_eval(cfg, name, args.window, args.threshold)
                    smoothed = reports["with_smoothing"]
                    print(
                        f"{name}: accuracy={smoothed.accuracy:.4f} map={smoothed.map:.4f} "
                        f"(window={smoothed.window})"
                    )
            elif args.command == "report":
                print(pipeline.stage_report(cfg))
            else:
                print(pipeline.run_all(cfg))
    except (QuavfError, OSError) as exc:
        print(f"quavf: stage '{stage}' failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    configure_numerics()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except QuavfError as exc:  # config errors surface before any stage runs
        print(f"quavf: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
