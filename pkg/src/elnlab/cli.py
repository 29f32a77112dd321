"""Command-line entry point: gen-data, pretrain, stage1, stage2, eval, ablate, plot."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config
from .errors import ElnLabError, PrerequisiteError
from .experiments import generate_data_folder, make_plots, run_ablation, run_eval
from .train import run_training

_STAGE_PREREQ = {"stage1": "pretrain", "stage2": "stage1"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eln-lab",
        description="Semi-supervised segmentation with pseudo-label error localization.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "materialize the synthetic dataset as a PNG folder + manifest"),
        ("pretrain", "supervised pretraining of the main segmentation network"),
        ("stage1", "joint labeled training (main + aux decoders + error net)"),
        ("stage2", "mean-teacher semi-supervised training with validity masking"),
        ("eval", "write eval.json for a checkpoint"),
        ("ablate", "run the configured ablation study over its seed list"),
        ("plot", "render loss curves and ablation bars as PNGs"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config output_dir")
        p.add_argument("--freeze-eln", action="store_true",
                       help="freeze the error net's parameters in stage 2")
        p.add_argument("--threshold", type=float, default=None,
                       help="override training.mask_threshold")
        if name == "eval":
            p.add_argument("--ckpt", default=None,
                           help="checkpoint to evaluate (default: newest stage checkpoint)")
    return parser


def _load_config(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.freeze_eln:
        cfg.training.freeze_eln = True
    if args.threshold is not None:
        cfg.training.mask_threshold = args.threshold
    cfg.validate()
    return cfg


def _require_checkpoint(cfg, stage: str, config_path: str) -> Path:
    prev = _STAGE_PREREQ[stage]
    path = Path(cfg.output_dir) / "checkpoints" / f"{prev}.ckpt"
    if not path.exists():
        raise PrerequisiteError(
            f"{stage} requires a {prev} checkpoint at {path}; "
            f"run `eln-lab {prev} --config {config_path}` first")
    return path


def _default_eval_ckpt(cfg) -> Path:
    ckpt_dir = Path(cfg.output_dir) / "checkpoints"
    for name in ("stage2.ckpt", "stage1.ckpt", "pretrain.ckpt"):
        if (ckpt_dir / name).exists():
            return ckpt_dir / name
    raise PrerequisiteError(
        f"no checkpoint found under {ckpt_dir}; train first or pass --ckpt")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            root = args.out or cfg.data.path or str(Path(cfg.output_dir) / "dataset")
            target = generate_data_folder(cfg, root)
            print(f"wrote dataset to {target}")
        elif args.command == "pretrain":
            run_training(cfg, stages=("pretrain",))
            print(f"pretrain done; outputs in {cfg.output_dir}")
        elif args.command in ("stage1", "stage2"):
            start = _require_checkpoint(cfg, args.command, args.config)
            run_training(cfg, stages=(args.command,), start_ckpt=start)
            print(f"{args.command} done; outputs in {cfg.output_dir}")
        elif args.command == "eval":
            ckpt = Path(args.ckpt) if args.ckpt else _default_eval_ckpt(cfg)
            report = run_eval(cfg, ckpt, Path(cfg.output_dir) / "eval.json")
            miou_txt = "n/a" if report["miou"] is None else f"{report['miou']:.4f}"
            print(f"eval written to {Path(cfg.output_dir) / 'eval.json'} (mIoU {miou_txt})")
        elif args.command == "ablate":
            summary = run_ablation(cfg)
            print(f"ablation summary written to {summary}")
        elif args.command == "plot":
            written = make_plots(cfg.output_dir)
            if not written:
                print("nothing to plot (no metrics.jsonl or summary.csv found)",
                      file=sys.stderr)
                return 1
            print("wrote " + ", ".join(str(p) for p in written))
        return 0
    except ElnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
