"""Command-line entry point: ``tbiseg <subcommand> [options]``.

Exit codes: 0 success, 1 stage failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .evaluation import challenge_metrics
from .pipeline import (
    SETTINGS,
    Pipeline,
    StageError,
    evaluate_manifest,
    load_config,
    metrics_dict,
    write_evaluation,
    write_report,
)
from .postprocess import binarize, ensemble_average
from .volume import read_nifti, write_nifti

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

SUBCOMMANDS = [
    "synth",
    "preprocess",
    "train-seg",
    "train-clf",
    "train-fpclf",
    "predict",
    "ensemble",
    "postprocess",
    "evaluate",
    "report",
    "run",
]

_HELP = {
    "synth": "generate the synthetic train/test cohorts (or register manifests)",
    "preprocess": "bias-correct, crop, resample and normalize every case",
    "train-seg": "train segmentation models (U-Net folds or the U-Net++)",
    "train-clf": "train the 2D slice classifier",
    "train-fpclf": "train the voxel false-positive classifier on out-of-fold predictions",
    "predict": "write test-set probability maps",
    "ensemble": "fuse probability maps (pipeline stage, or --inputs files)",
    "postprocess": "binarize and filter predictions for a setting (or --input file)",
    "evaluate": "score a setting (or a --manifest with predictions)",
    "report": "results table, lesion-size scatter, t-tests and error heatmaps",
    "run": "run every stage of a setting end to end",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--setting", type=int, choices=sorted(SETTINGS), help="pipeline setting 1..7")
    p.add_argument("--profile", choices=["desk", "paper"], help="baked-in defaults (default desk)")
    p.add_argument("--jobs", type=int, help="max concurrent training jobs")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--work-dir", help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbiseg", description="Lesion segmentation pipeline (Settings 1-7).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        _common(p)
        if name in ("train-seg", "predict"):
            p.add_argument("--arch", choices=["unet", "unetpp"], default="unet")
        if name == "ensemble":
            p.add_argument("--inputs", nargs="+", help="probability map files to average")
            p.add_argument("--weights", nargs="+", type=float)
            p.add_argument("--output", help="output map (with --inputs)")
        if name == "postprocess":
            p.add_argument("--input", help="probability map file to binarize")
            p.add_argument("--output", help="output mask (with --input)")
            p.add_argument("--threshold", type=float, default=0.5)
        if name == "evaluate":
            p.add_argument("--manifest", help="manifest with mask and prediction paths")
            p.add_argument("--output", help="directory for metrics.json and cases.csv")
        if name == "report":
            p.add_argument("--manifest", action="append", help="LABEL=PATH or PATH; repeatable")
            p.add_argument("--output", help="report directory")
            p.add_argument("--settings", nargs="+", type=int, choices=sorted(SETTINGS), help="pipeline settings to report")
    return parser


def _config(args):
    over = {}
    for key in ("setting", "profile", "jobs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "work_dir", None):
        over["work_dir"] = args.work_dir
    return load_config(args.config, over)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _run(args) -> int:
    cmd = args.command

    # file-mode commands that need no pipeline config
    if cmd == "ensemble" and args.inputs:
        if not args.output:
            raise _UsageError("--output is required with --inputs")
        maps = [read_nifti(p) for p in args.inputs]
        write_nifti(ensemble_average(maps, args.weights), args.output)
        return EXIT_OK
    if cmd == "postprocess" and args.input:
        if not args.output:
            raise _UsageError("--output is required with --input")
        write_nifti(binarize(read_nifti(args.input), args.threshold).to_volume(), args.output)
        return EXIT_OK
    if cmd == "evaluate" and args.manifest:
        results = evaluate_manifest(args.manifest)
        metrics = write_evaluation(Path(args.output), results) if args.output else challenge_metrics(results)
        _print(metrics_dict(metrics))
        return EXIT_OK
    if cmd == "report" and args.manifest:
        manifests = {}
        for i, item in enumerate(args.manifest):
            label, _, path = item.rpartition("=")
            manifests[label or f"m{i + 1}"] = Path(path)
        out = args.output or "report"
        _print(write_report(out, manifests)["settings"])
        return EXIT_OK

    try:
        cfg = _config(args)
    except (ValueError, TypeError, OSError) as exc:
        raise _UsageError(f"invalid configuration: {exc}") from None
    progress = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    if cmd == "run":
        pipe = Pipeline(cfg, auto=True, progress=progress)
        ev = pipe.evaluate(cfg.setting)
        pipe.provenance(cfg.setting, ev)
        print(f"setting {cfg.setting}: {ev.dir}")
        _print(json.loads((ev.dir / "metrics.json").read_text()))
        return EXIT_OK

    family = {"predict": "predict", "ensemble": "ensemble"}.get(cmd, cmd)
    pipe = Pipeline(cfg, auto=False, targets=[family], progress=progress)
    if cmd == "synth":
        st = pipe.data()
    elif cmd == "preprocess":
        st = pipe.preprocess()
    elif cmd == "train-seg":
        st = pipe.seg_models(args.arch)[-1]
    elif cmd == "train-clf":
        st = pipe.slice_classifier()
    elif cmd == "train-fpclf":
        pipe.targets.add("predict")  # out-of-fold maps belong to this stage's inputs
        st = pipe.fp_classifier()
    elif cmd == "predict":
        st = pipe.predictions(args.arch)[-1]
    elif cmd == "ensemble":
        source, _, _ = SETTINGS[cfg.setting]
        st = pipe.prob_maps("fused" if source == "fused" else "unet")
    elif cmd == "postprocess":
        st = pipe.postprocess(cfg.setting)
    elif cmd == "evaluate":
        st = pipe.evaluate(cfg.setting)
        _print(json.loads((st.dir / "metrics.json").read_text()))
        return EXIT_OK
    elif cmd == "report":
        settings = args.settings or [s for s in SETTINGS if _has_evaluation(pipe, s)]
        if not settings:
            raise StageError("evaluate", "missing upstream artifact: no evaluated setting found")
        manifests = {f"setting{s}": pipe.postprocess(s).dir / "predictions.json" for s in settings}
        out = Path(args.output) if args.output else Path(cfg.work_dir) / "report"
        _print(write_report(out, manifests, cfg.min_volume_mm3)["settings"])
        return EXIT_OK
    else:  # pragma: no cover - argparse restricts choices
        raise _UsageError(f"unknown command {cmd}")
    print(st.dir)
    return EXIT_OK


def _has_evaluation(pipe: Pipeline, setting: int) -> bool:
    try:
        pipe.evaluate(setting)
        return True
    except StageError:
        return False


class _UsageError(Exception):
    pass


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tbiseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, ValueError, TypeError, OSError, RuntimeError) as exc:
        print(f"tbiseg: stage failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
