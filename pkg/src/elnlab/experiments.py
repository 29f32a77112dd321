"""Evaluation reports, ablation sweeps, plots, and dataset materialization."""

from __future__ import annotations

import copy
import csv
import json
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_module_arrays
from .config import ExperimentConfig, config_hash, code_hash
from .data import Sample, generate_dataset, save_folder_dataset, write_manifest
from .errors import ConfigurationError
from .losses import correctness_mask
from .metrics import (accumulate_confusion, localization_metrics, miou,
                      new_confusion, per_class_iou, secn_valid_mask, threshold_mask)
from .models import build_eln_input, build_models, entropy_map
from .train import STAGES, build_data, run_training

THRESHOLD_SWEEP = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # 0.5 .. 0.95


def _load_eval_models(cfg: ExperimentConfig, ckpt_path: Path | str):
    ckpt = load_checkpoint(ckpt_path)
    error_model = ckpt.meta.get("error_model", cfg.training.error_model)
    model, error_net = build_models(cfg.model, cfg.seed, error_model)
    load_module_arrays(model, ckpt.arrays, "model")
    has_error_net = any(k.startswith("error_net.") for k in ckpt.arrays)
    if has_error_net:
        load_module_arrays(error_net, ckpt.arrays, "error_net")
    model.eval()
    error_net.eval()
    return ckpt, model, error_net if has_error_net else None, error_model


@torch.no_grad()
def _predict_batches(model, samples: list[Sample], batch_size: int = 16):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        out = model(images)
        yield start, images, out.probs[0]


@torch.no_grad()
def localization_reports(model, error_net, error_model: str, samples: list[Sample],
                         hidden_labels: list[np.ndarray],
                         thresholds=THRESHOLD_SWEEP) -> dict:
    """Precision/recall/F1 of each validity method against the true
    correctness of the model's predictions on held-out unlabeled samples."""
    method_masks: dict[str, list[np.ndarray]] = {f"threshold_{t}": [] for t in thresholds}
    if error_net is not None:
        method_masks[error_model] = []
    correct_all: list[np.ndarray] = []

    for start, images, probs in _predict_batches(model, samples):
        labels = torch.from_numpy(np.stack(hidden_labels[start:start + images.shape[0]]))
        correct_all.extend(correctness_mask(probs, labels).cpu().numpy())
        for t in thresholds:
            method_masks[f"threshold_{t}"].extend(threshold_mask(probs, t).cpu().numpy())
        if error_net is not None:
            net_in = build_eln_input(images, probs, entropy_map(probs))
            if error_model == "eln":
                mask = (error_net(net_in).squeeze(1) >= 0.5).float()
            else:
                mask = secn_valid_mask(error_net(net_in), probs)
            method_masks[error_model].extend(mask.cpu().numpy())

    correct = np.stack(correct_all)
    reports: dict = {"thresholds": {}}
    best_t, best_report = None, None
    for t in thresholds:
        rep = localization_metrics(np.stack(method_masks[f"threshold_{t}"]), correct)
        reports["thresholds"][str(t)] = rep.to_dict()
        if best_report is None or rep.f1 > best_report.f1:
            best_t, best_report = t, rep
    reports["threshold_best"] = {"t": best_t, **best_report.to_dict()}
    if error_net is not None:
        rep = localization_metrics(np.stack(method_masks[error_model]), correct)
        reports[error_model] = rep.to_dict()
    return reports


def run_eval(cfg: ExperimentConfig, ckpt_path: Path | str,
             out_path: Path | str | None = None) -> dict:
    """Full evaluation report for one checkpoint: validation mIoU plus
    error-localization metrics on the held-out unlabeled split."""
    ckpt, model, error_net, error_model = _load_eval_models(cfg, ckpt_path)
    split, val_samples = build_data(cfg)

    report: dict = {
        "checkpoint": str(ckpt_path),
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "code_hash": code_hash(),
        "miou": None,
        "per_class_iou": None,
        "localization": None,
    }
    if val_samples:
        cm = new_confusion(cfg.model.num_classes)
        for start, _, probs in _predict_batches(model, val_samples):
            labels = np.stack([s.label for s in val_samples[start:start + probs.shape[0]]])
            accumulate_confusion(cm, probs.argmax(dim=1).cpu().numpy(), labels)
        report["miou"] = miou(cm)
        report["per_class_iou"] = [None if math.isnan(x) else float(x)
                                   for x in per_class_iou(cm)]
    if split.unlabeled:
        report["localization"] = localization_reports(
            model, error_net, error_model, split.unlabeled, split.hidden_labels)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# -- ablation grids ------------------------------------------------------

def _ablation_variants(study: str) -> dict[str, dict]:
    if study == "masking":
        return {
            "eln": {"training.error_model": "eln", "training.mask_method": "eln"},
            "secn": {"training.error_model": "secn", "training.mask_method": "secn"},
            "threshold": {"training.mask_method": "threshold"},
        }
    if study == "decoder_count":
        alphas = (20.0, 50.0, 100.0)
        return {f"K{k}": {"model.num_aux_decoders": k, "losses.alphas": alphas[:k]}
                for k in range(4)}
    if study == "loss_terms":
        return {
            "pseudo": {"training.use_contra": False},
            "contra": {"training.use_pseudo": False},
            "both": {},
            "threshold": {"training.mask_method": "threshold", "training.use_contra": False},
        }
    raise ConfigurationError(f"unknown ablation study '{study}'")


def _apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        obj = cfg
        *head, last = dotted.split(".")
        for part in head:
            obj = getattr(obj, part)
        setattr(obj, last, value)
    cfg.validate()
    return cfg


def _variant_f1(report: dict, variant: str) -> float | None:
    loc = report.get("localization") or {}
    if variant == "secn" and "secn" in loc:
        return loc["secn"]["f1"]
    if variant == "threshold" and "threshold_best" in loc:
        return loc["threshold_best"]["f1"]
    if "eln" in loc:
        return loc["eln"]["f1"]
    return None


def run_ablation(cfg: ExperimentConfig) -> Path:
    """Run the configured study over its variants and seed list, then write
    one summary row per variant with mean +- std of the per-seed reports."""
    study = cfg.ablate.study
    grid = _ablation_variants(study)
    if cfg.ablate.variants:
        unknown = set(cfg.ablate.variants) - set(grid)
        if unknown:
            raise ConfigurationError(f"unknown ablate.variants {sorted(unknown)} "
                                     f"for study '{study}'")
        grid = {k: grid[k] for k in cfg.ablate.variants}
    root = Path(cfg.output_dir)
    rows = []
    for variant, overrides in grid.items():
        mious, f1s = [], []
        for seed in cfg.ablate.seeds:
            sub_dir = root / study / variant / f"seed{seed}"
            sub_cfg = _apply_overrides(cfg, overrides)
            sub_cfg.seed = seed
            sub_cfg.output_dir = str(sub_dir)
            run_training(sub_cfg, stages=STAGES)
            report = run_eval(sub_cfg, sub_dir / "checkpoints" / "stage2.ckpt",
                              sub_dir / "eval.json")
            mious.append(report["miou"])
            f1 = _variant_f1(report, variant)
            if f1 is not None:
                f1s.append(f1)
        rows.append({
            "study": study, "variant": variant, "num_seeds": len(cfg.ablate.seeds),
            "miou_mean": float(np.mean(mious)), "miou_std": float(np.std(mious)),
            "f1_mean": float(np.mean(f1s)) if f1s else "",
            "f1_std": float(np.std(f1s)) if f1s else "",
        })
    summary_path = root / "summary.csv"
    root.mkdir(parents=True, exist_ok=True)
    with open(summary_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return summary_path


# -- plots ----------------------------------------------------------------

def make_plots(run_dir: Path | str) -> list[Path]:
    """Render loss curves from metrics.jsonl and metric bars from summary.csv
    (whichever exist) into <run_dir>/plots/."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    plots_dir = run_dir / "plots"
    written = []
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
        stages = [s for s in STAGES if any(r["stage"] == s for r in records)]
        if stages:
            plots_dir.mkdir(parents=True, exist_ok=True)
            fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 4))
            axes = np.atleast_1d(axes)
            for ax, stage in zip(axes, stages):
                recs = [r for r in records if r["stage"] == stage]
                its = [r["iter"] for r in recs]
                ax.plot(its, [r["total"] for r in recs], label="total")
                for key in ("sup", "aux", "eln", "pseudo", "contra"):
                    if any(key in r for r in recs):
                        ax.plot(its, [r.get(key, np.nan) for r in recs], label=key, alpha=0.7)
                ax.set_title(stage)
                ax.set_xlabel("iteration")
                ax.set_ylabel("loss")
                ax.legend(fontsize=7)
            fig.tight_layout()
            target = plots_dir / "loss_curves.png"
            fig.savefig(target, dpi=110)
            plt.close(fig)
            written.append(target)

            evals = [(r["iter"], r["miou"], r["stage"]) for r in records if "miou" in r]
            if evals:
                fig, ax = plt.subplots(figsize=(6, 4))
                for stage in stages:
                    pts = [(i, m) for i, m, s in evals if s == stage]
                    if pts:
                        ax.plot(*zip(*pts), marker="o", label=stage)
                ax.set_xlabel("iteration")
                ax.set_ylabel("validation mIoU")
                ax.legend()
                fig.tight_layout()
                target = plots_dir / "miou.png"
                fig.savefig(target, dpi=110)
                plt.close(fig)
                written.append(target)

    summary_path = run_dir / "summary.csv"
    if summary_path.exists():
        with open(summary_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            plots_dir.mkdir(parents=True, exist_ok=True)
            names = [r["variant"] for r in rows]
            means = [float(r["miou_mean"]) for r in rows]
            stds = [float(r["miou_std"]) for r in rows]
            fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 4))
            ax.bar(names, means, yerr=stds, capsize=4)
            ax.set_ylabel("mIoU")
            ax.set_title(rows[0]["study"])
            fig.tight_layout()
            target = plots_dir / "ablation_miou.png"
            fig.savefig(target, dpi=110)
            plt.close(fig)
            written.append(target)
    return written


# -- dataset materialization ----------------------------------------------

def generate_data_folder(cfg: ExperimentConfig, root: Path | str) -> Path:
    """Write the synthetic dataset (train + val) as a folder dataset with a
    JSON manifest recording the recipe."""
    if cfg.data.kind != "synthetic":
        raise ConfigurationError("gen-data requires data.kind='synthetic'")
    root = Path(root)
    spec = cfg.data.scene_spec(cfg.seed)
    train = generate_dataset(spec, cfg.data.num_images)
    val = generate_dataset(spec, cfg.data.num_val, start=cfg.data.num_images)
    save_folder_dataset(train, root)
    if val:
        save_folder_dataset(val, root / "val")
    write_manifest(root / "manifest.json", spec, cfg.data.num_images, cfg.data.num_val)
    return root
