"""Two-stage training: supervised pretraining and joint labeled training of
the segmentation network, constrained auxiliary decoders, and the error net,
followed by mean-teacher semi-supervised training with validity masking.

Every source of randomness is drawn from a numpy Generator derived from
(seed, stage, step, purpose), so runs are bit-reproducible and resuming from
a mid-stage checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import losses as L
from .checkpoint import (Checkpoint, load_checkpoint, load_module_arrays,
                         load_optimizer_arrays, module_arrays, optimizer_arrays,
                         save_checkpoint)
from .config import ExperimentConfig, write_resolved_config
from .data import (DatasetSplit, Sample, augment_shared, generate_dataset,
                   load_folder_dataset, make_splits, perturb_photometric)
from .errors import CheckpointError, ConfigurationError
from .metrics import confusion_from_model, miou, secn_valid_mask, threshold_mask
from .models import (SegmentationModel, build_eln_input, build_models, entropy_map)

STAGES = ("pretrain", "stage1", "stage2")
_STAGE_ID = {"pretrain": 1, "stage1": 2, "stage2": 3}
_DATA_SALT = 11
_CONTRA_SALT = 13


def step_rng(seed: int, stage: str, step: int, salt: int) -> np.random.Generator:
    """Fresh generator for one (stage, step, purpose); never carries state."""
    return np.random.default_rng([seed, _STAGE_ID[stage], salt, step])


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, beta: float) -> None:
    """teacher <- beta * teacher + (1 - beta) * student, matched by path.

    Every teacher parameter path must exist in the student with the same
    shape; the student may own extra parameters (auxiliary decoders) that
    the teacher does not mirror.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    student_params = dict(student.named_parameters())
    for name, tp in teacher.named_parameters():
        sp = student_params.get(name)
        if sp is None or sp.shape != tp.shape:
            raise ValueError(f"teacher/student topology mismatch at '{name}'")
        tp.lerp_(sp, 1.0 - beta)


def build_data(cfg: ExperimentConfig) -> tuple[DatasetSplit, list[Sample]]:
    """Materialize the training split and held-out validation samples."""
    if cfg.data.kind == "synthetic":
        spec = cfg.data.scene_spec(cfg.seed)
        train = generate_dataset(spec, cfg.data.num_images)
        val = generate_dataset(spec, cfg.data.num_val, start=cfg.data.num_images)
    else:
        train = load_folder_dataset(cfg.data.path, cfg.data.num_classes)
        if not train:
            raise ConfigurationError(f"no samples found under data.path='{cfg.data.path}'")
        val = load_folder_dataset(Path(cfg.data.path) / "val", cfg.data.num_classes)
    split = make_splits(train, cfg.data.split_ratio, cfg.seed)
    return split, val


class MetricLog:
    """JSON-lines step log; keys are sorted so identical runs log identical bytes."""

    def __init__(self, path: Path | None, append: bool = False):
        self.path = Path(path) if path else None
        self.history: list[dict] = []
        if self.path and not append:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        self.history.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


class Trainer:
    """Owns the models, optimizer, and stage bookkeeping for one run."""

    def __init__(self, cfg: ExperimentConfig, split: DatasetSplit, val_samples: list[Sample]):
        cfg.validate()
        torch.set_num_threads(cfg.training.math_threads)
        self.cfg = cfg
        self.split = split
        self.val_samples = val_samples
        self.model, self.error_net = build_models(cfg.model, cfg.seed,
                                                  cfg.training.error_model)
        self.teacher: SegmentationModel | None = None
        self.stage = "pretrain"
        self.iteration = 0
        self.optimizer: torch.optim.AdamW | None = None
        self._opt_named: list[tuple[str, nn.Parameter]] = []

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Trainer":
        split, val = build_data(cfg)
        return cls(cfg, split, val)

    # -- stage setup ------------------------------------------------------

    def _stage_parameters(self, stage: str) -> list[tuple[str, nn.Parameter]]:
        named = []
        if stage == "pretrain":
            for n, p in self.model.named_parameters():
                if n.startswith(("encoder.", "decoder.")):
                    named.append((f"model.{n}", p))
            return named
        named = [(f"model.{n}", p) for n, p in self.model.named_parameters()]
        if not (stage == "stage2" and self.cfg.training.freeze_eln):
            named += [(f"error_net.{n}", p) for n, p in self.error_net.named_parameters()]
        return named

    def start_stage(self, stage: str) -> None:
        """Reset iteration and build a fresh optimizer over the stage's parameters."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}'")
        self.stage = stage
        self.iteration = 0
        self._opt_named = self._stage_parameters(stage)
        self.optimizer = torch.optim.AdamW(
            [p for _, p in self._opt_named],
            lr=self.cfg.optim.learning_rate,
            weight_decay=self.cfg.optim.weight_decay,
        )
        if stage == "stage2":
            self._init_teacher()

    def _init_teacher(self) -> None:
        teacher_cfg = replace(copy.deepcopy(self.cfg.model), num_aux_decoders=0)
        self.teacher = SegmentationModel(teacher_cfg)
        student = dict(self.model.named_parameters())
        with torch.no_grad():
            for name, tp in self.teacher.named_parameters():
                tp.copy_(student[name])
        self.teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    # -- batches ----------------------------------------------------------

    def _labeled_batch(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        pool = self.split.labeled
        if not pool:
            raise ConfigurationError("labeled split is empty")
        bs = self.cfg.optim.labeled_batch_size
        idx = rng.choice(len(pool), size=bs, replace=len(pool) < bs)
        samples = [augment_shared(pool[i], self.cfg.data.augment, rng) for i in idx]
        images = torch.from_numpy(np.stack([s.image for s in samples]))
        labels = torch.from_numpy(np.stack([s.label for s in samples]))
        return images, labels

    def _unlabeled_batch(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Returns (clean, photometric-perturbed) views with shared geometry."""
        pool = self.split.unlabeled
        if not pool:
            raise ConfigurationError("unlabeled split is empty")
        bs = self.cfg.optim.unlabeled_batch_size
        idx = rng.choice(len(pool), size=bs, replace=len(pool) < bs)
        flipped = [augment_shared(pool[i], self.cfg.data.augment, rng) for i in idx]
        clean = torch.from_numpy(np.stack([s.image for s in flipped]))
        pert = torch.from_numpy(np.stack([
            perturb_photometric(s.image, self.cfg.data.augment, rng) for s in flipped]))
        return clean, pert

    # -- losses -----------------------------------------------------------

    def _labeled_losses(self, images: Tensor, labels: Tensor) -> tuple[Tensor, dict]:
        if labels is None:
            raise ValueError("labeled batch is required")
        out = self.model(images, with_aux=True)
        sup = L.sup_loss(out.probs[0], labels)
        aux, aux_diag = L.aux_loss(out.probs[0], out.probs[1:], labels,
                                   self.cfg.losses.alphas)
        err_grad = not (self.stage == "stage2" and self.cfg.training.freeze_eln)
        with torch.enable_grad() if err_grad else torch.no_grad():
            err_term, err_diag = self._error_net_loss(images, out.probs, labels)
        if not err_grad:
            err_term = err_term.detach()
        total = L.labeled_total(sup, aux, err_term)
        diag = {
            "sup": float(sup.detach()),
            "aux": float(aux.detach()),
            "eln": float(err_term.detach()),
            "gate_fraction": aux_diag["gate_fraction"],
            "aux_ce": aux_diag["aux_ce"],
            "main_ce": aux_diag.get("main_ce", float(sup.detach())),
            "wbce_fallbacks": err_diag.get("fallback_images", 0),
        }
        return total, diag

    def _error_net_loss(self, images: Tensor, probs: list[Tensor],
                        labels: Tensor) -> tuple[Tensor, dict]:
        """Error-net slot of the labeled objective. Decoder predictions enter
        as constants, so only the error net receives gradient."""
        secn = self.cfg.training.error_model == "secn"
        validities, masks, terms = [], [], []
        for probs_k in probs:
            probs_det = probs_k.detach()
            net_in = build_eln_input(images, probs_det, entropy_map(probs_det))
            if secn:
                corrected = self.error_net(net_in)
                terms.append(L.ce_loss(corrected, labels))
            else:
                validities.append(self.error_net(net_in))
                masks.append(L.correctness_mask(probs_det, labels))
        if secn:
            return torch.stack(terms).mean(), {"per_decoder": [float(t.detach()) for t in terms]}
        return L.eln_loss(validities, masks)

    def _validity_map(self, images: Tensor, teacher_probs: Tensor) -> Tensor:
        """Per-pixel validity [B, 1, H, W] from the configured mask source."""
        method = self.cfg.training.mask_method
        if method == "none":
            return torch.ones_like(teacher_probs[:, :1])
        if method == "threshold":
            return threshold_mask(teacher_probs, self.cfg.training.mask_threshold).unsqueeze(1)
        net_in = build_eln_input(images, teacher_probs, entropy_map(teacher_probs))
        if method == "eln":
            return self.error_net(net_in)
        corrected = self.error_net(net_in)
        return secn_valid_mask(corrected, teacher_probs).unsqueeze(1)

    # -- steps ------------------------------------------------------------

    def pretrain_step(self, batch: tuple[Tensor, Tensor]) -> dict:
        """One supervised step on encoder + main decoder only."""
        if self.stage != "pretrain":
            raise ValueError(f"pretrain step called in stage '{self.stage}'")
        images, labels = batch
        out = self.model(images)
        loss = L.sup_loss(out.probs[0], labels)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        return {"total": float(loss.detach()), "sup": float(loss.detach())}

    def pretrain_main(self, steps: int, log: MetricLog | None = None) -> None:
        """Supervised pretraining loop; aux decoders and error net untouched."""
        for _ in range(steps):
            rng = step_rng(self.cfg.seed, "pretrain", self.iteration, _DATA_SALT)
            diag = self.pretrain_step(self._labeled_batch(rng))
            if log is not None:
                log.log({"stage": "pretrain", "iter": self.iteration, **diag})

    def stage1_step(self, batch: tuple[Tensor, Tensor]) -> dict:
        """One optimizer step on the joint labeled objective."""
        if self.stage != "stage1":
            raise ValueError(f"stage1_step called in stage '{self.stage}'")
        images, labels = batch
        total, diag = self._labeled_losses(images, labels)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.iteration += 1
        diag["total"] = float(total.detach())
        return diag

    def stage2_step(self, labeled_batch: tuple[Tensor, Tensor],
                    unlabeled_batch: tuple[Tensor, Tensor]) -> dict:
        """One mean-teacher step: labeled objective plus validity-masked
        self-training and contrastive terms, then the EMA teacher update."""
        if self.stage != "stage2":
            raise ValueError(f"stage2_step called in stage '{self.stage}'")
        if self.teacher is None:
            raise ValueError("teacher not initialized")
        if unlabeled_batch is None:
            raise ValueError("stage2_step requires an unlabeled batch")
        t = self.cfg.training
        images_l, labels_l = labeled_batch
        x_clean, x_pert = unlabeled_batch

        lab_total, diag = self._labeled_losses(images_l, labels_l)

        with torch.no_grad():
            t_out = self.teacher(x_clean)
            teacher_probs = t_out.probs[0]
            teacher_emb = t_out.embedding
            pseudo = L.pseudo_labels(teacher_probs)
            validity = self._validity_map(x_clean, teacher_probs)

        s_out = self.model(x_pert)
        zero = lab_total.new_zeros(())
        l_pseudo, l_contra = zero, zero
        if t.use_pseudo:
            l_pseudo, pdiag = L.pseudo_loss(s_out.probs[0], pseudo, validity)
            diag["valid_fraction"] = pdiag["valid_fraction"]
        else:
            diag["valid_fraction"] = float((validity >= 0.5).float().mean())
        if t.use_contra:
            emb_size = s_out.embedding.shape[-2:]
            pseudo_f = F.interpolate(pseudo.unsqueeze(1).float(), size=emb_size,
                                     mode="nearest").squeeze(1).long()
            validity_f = F.interpolate(validity, size=emb_size, mode="nearest")
            rng = step_rng(self.cfg.seed, "stage2", self.iteration, _CONTRA_SALT)
            l_contra, cdiag = L.contrastive_loss(s_out.embedding, teacher_emb, pseudo_f,
                                                 validity_f, self.cfg.losses.contrastive, rng)
            diag["contra_anchors"] = cdiag["num_anchors"]

        total = lab_total + L.unlabeled_total(l_pseudo, l_contra)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        ema_update(self.teacher, self.model, self.cfg.ema_beta)
        self.iteration += 1
        diag.update({"total": float(total.detach()),
                     "pseudo": float(l_pseudo.detach()),
                     "contra": float(l_contra.detach())})
        return diag

    # -- evaluation and checkpoints ----------------------------------------

    def evaluate_miou(self) -> float | None:
        if not self.val_samples:
            return None
        cm = confusion_from_model(self.model, self.val_samples, self.cfg.model.num_classes)
        self.model.train()
        return miou(cm)

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = module_arrays(self.model, "model")
        arrays.update(module_arrays(self.error_net, "error_net"))
        if self.teacher is not None:
            arrays.update(module_arrays(self.teacher, "teacher"))
        if self.optimizer is not None:
            arrays.update(optimizer_arrays(self.optimizer, self._opt_named))
        return arrays

    def save(self, path: Path | str) -> None:
        save_checkpoint(path, self.checkpoint_arrays(), stage=self.stage,
                        iteration=self.iteration, config=self.cfg.to_dict(),
                        meta={"error_model": self.cfg.training.error_model})

    def save_student(self, path: Path | str) -> None:
        """Export only the inference network (encoder + main decoder)."""
        arrays = {k: v for k, v in module_arrays(self.model, "model").items()
                  if k.startswith(("model.encoder.", "model.decoder."))}
        save_checkpoint(path, arrays, stage=self.stage, iteration=self.iteration,
                        config=self.cfg.to_dict(), meta={"student_only": True})

    @classmethod
    def from_checkpoint(cls, cfg: ExperimentConfig, ckpt: Checkpoint,
                        with_optimizer: bool = True) -> "Trainer":
        trainer = cls.from_config(cfg)
        load_module_arrays(trainer.model, ckpt.arrays, "model")
        if any(k.startswith("error_net.") for k in ckpt.arrays):
            load_module_arrays(trainer.error_net, ckpt.arrays, "error_net")
        trainer.stage = ckpt.stage
        trainer.start_stage(ckpt.stage)
        trainer.iteration = ckpt.iteration
        if any(k.startswith("teacher.") for k in ckpt.arrays):
            load_module_arrays(trainer.teacher, ckpt.arrays, "teacher")
        if with_optimizer:
            load_optimizer_arrays(trainer.optimizer, trainer._opt_named, ckpt.arrays)
        return trainer


def _stage_steps(cfg: ExperimentConfig, stage: str) -> int:
    return {"pretrain": cfg.training.pretrain_steps,
            "stage1": cfg.training.stage1_steps,
            "stage2": cfg.training.stage2_steps}[stage]


def run_stage(trainer: Trainer, stage: str, steps: int, log: MetricLog,
              ckpt_dir: Path | None = None) -> None:
    """Drive one stage to `steps` iterations with eval/checkpoint cadence."""
    if trainer.stage != stage or trainer.optimizer is None:
        trainer.start_stage(stage)
    t = trainer.cfg.training
    while trainer.iteration < steps:
        rng = step_rng(trainer.cfg.seed, stage, trainer.iteration, _DATA_SALT)
        if stage == "pretrain":
            diag = trainer.pretrain_step(trainer._labeled_batch(rng))
        elif stage == "stage1":
            diag = trainer.stage1_step(trainer._labeled_batch(rng))
        else:
            labeled = trainer._labeled_batch(rng)
            unlabeled = trainer._unlabeled_batch(rng)
            diag = trainer.stage2_step(labeled, unlabeled)
        record = {"stage": stage, "iter": trainer.iteration, **diag}
        if trainer.iteration % t.eval_every == 0 or trainer.iteration == steps:
            val = trainer.evaluate_miou()
            if val is not None:
                record["miou"] = val
        log.log(record)
        if ckpt_dir is not None and trainer.iteration % t.checkpoint_every == 0 \
                and trainer.iteration < steps:
            trainer.save(Path(ckpt_dir) / f"{stage}_iter{trainer.iteration:06d}.ckpt")
    if ckpt_dir is not None:
        trainer.save(Path(ckpt_dir) / f"{stage}.ckpt")


def run_training(cfg: ExperimentConfig, stages: tuple[str, ...] = STAGES,
                 start_ckpt: Path | str | None = None,
                 resume: bool = False) -> dict:
    """Execute the requested stages and write logs/checkpoints to the run dir.

    ``start_ckpt`` seeds the models from an earlier stage's checkpoint;
    with ``resume=True`` it must be a mid-stage checkpoint of the first
    requested stage and training continues from its iteration.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)

    if start_ckpt is not None:
        ckpt = load_checkpoint(start_ckpt)
        _check_start_ckpt(cfg, ckpt, stages, resume)
        trainer = Trainer.from_checkpoint(cfg, ckpt, with_optimizer=resume)
    else:
        trainer = Trainer.from_config(cfg)

    log = MetricLog(out / "metrics.jsonl", append=resume)
    for stage in stages:
        run_stage(trainer, stage, _stage_steps(cfg, stage), log, ckpt_dir)
    if stages and stages[-1] == "stage2":
        trainer.save_student(ckpt_dir / "student_final.ckpt")
    return {"output_dir": str(out), "metrics": str(log.path),
            "final_stage": trainer.stage, "iteration": trainer.iteration}


def _check_start_ckpt(cfg: ExperimentConfig, ckpt: Checkpoint,
                      stages: tuple[str, ...], resume: bool) -> None:
    from .config import compatible_for_next_stage
    if resume:
        if ckpt.stage != stages[0]:
            raise CheckpointError(
                f"resume checkpoint is for stage '{ckpt.stage}', not '{stages[0]}'")
        current = cfg.to_dict()
        saved = dict(ckpt.config)
        for skip in ("output_dir",):
            current.pop(skip, None)
            saved.pop(skip, None)
        if current != saved:
            raise CheckpointError("resume checkpoint config does not match the run config")
        return
    mismatches = compatible_for_next_stage(ckpt.config, cfg)
    if mismatches:
        raise CheckpointError(
            f"checkpoint config incompatible in sections: {mismatches}")
    prev = {"stage1": "pretrain", "stage2": "stage1"}.get(stages[0])
    if prev is not None and ckpt.stage != prev:
        raise CheckpointError(
            f"stage '{stages[0]}' expects a '{prev}' checkpoint, got '{ckpt.stage}'")
