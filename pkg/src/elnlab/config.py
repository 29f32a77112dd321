"""Experiment configuration: JSON file -> validated config with defaults.

A single config file fully determines a run. Unknown keys are rejected with
the offending dotted key name; the resolved config is echoed into the run
directory as ``config.resolved.json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .data import AugmentationConfig, SyntheticSceneSpec
from .errors import ConfigurationError
from .losses import ContrastiveConfig
from .models import SegModelConfig

MASK_METHODS = ("eln", "secn", "threshold", "none")
ERROR_MODELS = ("eln", "secn")
ABLATION_STUDIES = ("masking", "decoder_count", "loss_terms")


@dataclass
class DataConfig:
    kind: str = "synthetic"              # "synthetic" | "folder"
    path: str | None = None              # folder root for kind="folder"
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    num_images: int = 256
    num_val: int = 32
    shapes_per_image: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = ("rectangle", "ellipse", "triangle")
    texture_noise_std: float = 0.05
    color_jitter: float = 0.0
    split_ratio: float = 0.125
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def scene_spec(self, seed: int) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(
            image_size=self.image_size, num_classes=self.num_classes,
            shapes_per_image=self.shapes_per_image, shape_kinds=self.shape_kinds,
            texture_noise_std=self.texture_noise_std, color_jitter=self.color_jitter,
            seed=seed)


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    labeled_batch_size: int = 4
    unlabeled_batch_size: int = 4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("optim.learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("optim.weight_decay must be >= 0")
        if min(self.labeled_batch_size, self.unlabeled_batch_size) < 1:
            raise ConfigurationError("optim batch sizes must be >= 1")


@dataclass
class LossConfig:
    alphas: tuple[float, ...] = (20.0, 50.0)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)


@dataclass
class TrainingConfig:
    pretrain_steps: int = 500
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    eval_every: int = 200
    checkpoint_every: int = 500
    freeze_eln: bool = False
    error_model: str = "eln"             # which error net stage 1 trains
    mask_method: str = "eln"             # stage-2 validity source
    mask_threshold: float = 0.7          # for mask_method="threshold"
    use_pseudo: bool = True
    use_contra: bool = True
    math_threads: int = 1


@dataclass
class AblateConfig:
    study: str = "masking"
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ()       # empty = the study's full grid


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema_beta: float = 0.995
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigurationError("ema_beta must be in [0, 1)")
        if self.data.kind not in ("synthetic", "folder"):
            raise ConfigurationError(f"data.kind must be synthetic|folder, got '{self.data.kind}'")
        if self.data.kind == "folder" and not self.data.path:
            raise ConfigurationError("data.path is required when data.kind='folder'")
        if not 0.0 < self.data.split_ratio < 1.0:
            raise ConfigurationError("data.split_ratio must be in (0, 1)")
        if self.data.kind == "synthetic":
            self.data.scene_spec(self.seed).validate()
        self.data.augment.validate()
        self.model.validate()
        if self.model.num_classes != self.data.num_classes:
            raise ConfigurationError(
                "model.num_classes must equal data.num_classes "
                f"({self.model.num_classes} vs {self.data.num_classes})")
        if len(self.losses.alphas) != self.model.num_aux_decoders:
            raise ConfigurationError(
                f"losses.alphas has {len(self.losses.alphas)} entries but "
                f"model.num_aux_decoders is {self.model.num_aux_decoders}")
        self.losses.contrastive.validate()
        self.optim.validate()
        t = self.training
        if min(t.pretrain_steps, t.stage1_steps, t.stage2_steps) < 0:
            raise ConfigurationError("training stage lengths must be >= 0")
        if t.eval_every < 1 or t.checkpoint_every < 1:
            raise ConfigurationError("training.eval_every/checkpoint_every must be >= 1")
        if t.error_model not in ERROR_MODELS:
            raise ConfigurationError(f"training.error_model must be one of {ERROR_MODELS}")
        if t.mask_method not in MASK_METHODS:
            raise ConfigurationError(f"training.mask_method must be one of {MASK_METHODS}")
        if not 0.0 < t.mask_threshold < 1.0:
            raise ConfigurationError("training.mask_threshold must be in (0, 1)")
        if t.math_threads < 1:
            raise ConfigurationError("training.math_threads must be >= 1")
        if self.ablate.study not in ABLATION_STUDIES:
            raise ConfigurationError(f"ablate.study must be one of {ABLATION_STUDIES}")
        if not self.ablate.seeds:
            raise ConfigurationError("ablate.seeds must not be empty")

    def to_dict(self) -> dict:
        # JSON round-trip normalizes tuples to lists so dict equality holds
        # against configs loaded back from checkpoint headers.
        return json.loads(json.dumps(asdict(self)))


def _merge_into(obj, raw: dict, path: str = "") -> None:
    """Deep-merge a raw dict into a dataclass tree, rejecting unknown keys."""
    by_name = {f.name: f for f in fields(obj)}
    for key, value in raw.items():
        dotted = f"{path}{key}"
        if key not in by_name:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            _merge_into(current, value, path=f"{dotted}.")
        elif is_dataclass(current):
            raise ConfigurationError(f"config key '{dotted}' expects an object")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            setattr(obj, key, value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _merge_into(cfg, raw)
    cfg.validate()
    return cfg


def parse_config(path: Path | str) -> ExperimentConfig:
    """Load a JSON config file, fill defaults, validate, and return it."""
    path = Path(path)
    text = path.read_text().strip()
    raw = json.loads(text) if text else {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root in {path} must be a JSON object")
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of the resolved config (excluding the output location)."""
    payload = cfg.to_dict()
    payload.pop("output_dir", None)
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def code_hash() -> str:
    """Content hash over the package's source files, git-blob style."""
    pkg = Path(__file__).parent
    lines = []
    for src in sorted(pkg.glob("*.py")):
        content = src.read_bytes()
        blob = b"blob %d\0" % len(content) + content
        lines.append(f"{src.name} {hashlib.sha1(blob).hexdigest()}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()[:16]


def write_resolved_config(cfg: ExperimentConfig, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = cfg.to_dict()
    payload["config_hash"] = config_hash(cfg)
    payload["code_hash"] = code_hash()
    target = out_dir / "config.resolved.json"
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return target


def compatible_for_next_stage(ckpt_config: dict, cfg: ExperimentConfig) -> list[str]:
    """Config sections that must match when continuing from a checkpoint
    produced by an earlier stage; returns the mismatched section names.

    Only dataset identity (seed, data) and network topology (model) are
    binding across stages; loss weights, optimizer, and stage behavior are
    free to differ between runs of different stages.
    """
    current = cfg.to_dict()
    mismatches = []
    if ckpt_config.get("seed") != current.get("seed"):
        mismatches.append("seed")
    # augmentation is runtime behavior, not dataset identity
    saved_data = dict(ckpt_config.get("data") or {})
    saved_data.pop("augment", None)
    current_data = dict(current["data"])
    current_data.pop("augment", None)
    if saved_data != current_data:
        mismatches.append("data")
    if ckpt_config.get("model") != current.get("model"):
        mismatches.append("model")
    return mismatches
