"""Synthetic scene generation, folder datasets, splits, and augmentations.

Everything here is numpy-only and deterministic: each operation is a pure
function of its inputs plus an explicit seed or ``numpy.random.Generator``.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")

# Luminance weights used for grayscale / saturation ops.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for a deterministic synthetic segmentation dataset.

    Scenes are solid-color shapes (one color per class) over a noisy gray
    background; background pixels are class 0, shapes carry classes
    1..num_classes-1. Identical (spec, index) pairs produce bit-identical
    samples.
    """

    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    texture_noise_std: float = 0.05
    color_jitter: float = 0.0   # per-shape hue jitter half-range (difficulty dial)
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigurationError(f"image_size too small: {self.image_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.shape_kinds:
            raise ConfigurationError("shape_kinds must not be empty")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown shape kinds: {sorted(unknown)}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad shapes_per_image range: {self.shapes_per_image}")
        if self.texture_noise_std < 0:
            raise ConfigurationError("texture_noise_std must be >= 0")
        if self.color_jitter < 0:
            raise ConfigurationError("color_jitter must be >= 0")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")


@dataclass
class Sample:
    """One image with an optional dense label map.

    image: float32 [3, H, W] in [0, 1]; label: int64 [H, W] or None for
    unlabeled samples.
    """

    image: np.ndarray
    label: np.ndarray | None = None


@dataclass
class DatasetSplit:
    """Labeled/unlabeled partition of a fully labeled sample collection.

    Unlabeled samples have their labels stripped; the originals are kept in
    ``hidden_labels`` (aligned with ``unlabeled``) strictly for evaluation
    and never handed to training code.
    """

    labeled: list[Sample]
    unlabeled: list[Sample]
    hidden_labels: list[np.ndarray]
    ratio: float
    seed: int


@dataclass
class AugmentationConfig:
    flip_probability: float = 0.5
    photometric_probability: float = 0.2
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    grayscale_probability: float = 0.2

    def validate(self) -> None:
        for key in ("flip_probability", "photometric_probability", "grayscale_probability"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"augment.{key} must be in [0, 1], got {v}")
        for key in ("brightness", "contrast", "saturation"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"augment.{key} must be >= 0")


def class_hue(cls: int, num_classes: int) -> float:
    return 0.85 * (cls - 1) / max(num_classes - 2, 1)


def class_color(cls: int, num_classes: int, hue_offset: float = 0.0) -> np.ndarray:
    """RGB color for a shape class; hue_offset shifts it within the class's
    jitter band (large offsets make neighboring classes visually ambiguous)."""
    hue = (class_hue(cls, num_classes) + hue_offset) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.85), dtype=np.float64)


def _draw_rectangle(rng: np.random.Generator, h: int, w: int) -> dict:
    rh = int(rng.integers(h // 8, h // 2 + 1))
    rw = int(rng.integers(w // 8, w // 2 + 1))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return {"r0": r0, "c0": c0, "r1": r0 + rh, "c1": c0 + rw}


def _draw_ellipse(rng: np.random.Generator, h: int, w: int) -> dict:
    ry = int(rng.integers(max(h // 10, 2), h // 3 + 1))
    rx = int(rng.integers(max(w // 10, 2), w // 3 + 1))
    cy = int(rng.integers(ry, h - ry + 1))
    cx = int(rng.integers(rx, w - rx + 1))
    return {"cy": cy, "cx": cx, "ry": ry, "rx": rx}


def _draw_triangle(rng: np.random.Generator, h: int, w: int) -> dict:
    # Resample until the triangle is not degenerate (bounded retries).
    for _ in range(10):
        pts = rng.uniform(0.0, 1.0, size=(3, 2)) * np.array([h - 1, w - 1])
        (y0, x0), (y1, x1), (y2, x2) = pts
        area = 0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
        if area >= 0.03 * h * w:
            break
    return {"points": pts.tolist()}


def scene_script(spec: SyntheticSceneSpec, index: int) -> dict:
    """Draw all random scene parameters (the generator recipe) for one index.

    The returned script fully determines the label map; pixel noise is drawn
    from the same stream after the script, so scripts and samples stay in
    lockstep.
    """
    spec.validate()
    if index < 0:
        raise ConfigurationError(f"scene index must be >= 0, got {index}")
    rng = _scene_rng(spec, index)
    script = _draw_script(spec, rng)
    return script


def _scene_rng(spec: SyntheticSceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _draw_script(spec: SyntheticSceneSpec, rng: np.random.Generator) -> dict:
    h, w = spec.image_size
    base = float(rng.uniform(0.25, 0.45))
    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(n_shapes):
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        cls = int(rng.integers(1, spec.num_classes))
        if kind == "rectangle":
            geom = _draw_rectangle(rng, h, w)
        elif kind == "ellipse":
            geom = _draw_ellipse(rng, h, w)
        else:
            geom = _draw_triangle(rng, h, w)
        shade = float(rng.uniform(-0.08, 0.08))
        hue_offset = float(rng.uniform(-spec.color_jitter, spec.color_jitter)) \
            if spec.color_jitter > 0 else 0.0
        shapes.append({"kind": kind, "cls": cls, "shade": shade,
                       "hue_offset": hue_offset, **geom})
    return {"background": base, "shapes": shapes}


def shape_mask(shape: dict, h: int, w: int) -> np.ndarray:
    """Boolean membership mask of one scripted shape (vectorized)."""
    kind = shape["kind"]
    if kind == "rectangle":
        mask = np.zeros((h, w), dtype=bool)
        mask[shape["r0"]:shape["r1"] + 1, shape["c0"]:shape["c1"] + 1] = True
        return mask
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "ellipse":
        dy = (yy - shape["cy"]) / shape["ry"]
        dx = (xx - shape["cx"]) / shape["rx"]
        return dy * dy + dx * dx <= 1.0
    (y0, x0), (y1, x1), (y2, x2) = shape["points"]
    d0 = (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0)
    d1 = (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1)
    d2 = (xx - x2) * (y0 - y2) - (yy - y2) * (x0 - x2)
    eps = 1e-9
    return ((d0 >= -eps) & (d1 >= -eps) & (d2 >= -eps)) | ((d0 <= eps) & (d1 <= eps) & (d2 <= eps))


def generate_scene(spec: SyntheticSceneSpec, index: int) -> Sample:
    """Render one synthetic scene: noisy background plus solid-color shapes.

    Later shapes overwrite earlier ones; the label map tracks the same
    z-order, so every shape interior pixel carries its class.
    """
    spec.validate()
    if index < 0:
        raise ConfigurationError(f"scene index must be >= 0, got {index}")
    h, w = spec.image_size
    rng = _scene_rng(spec, index)
    script = _draw_script(spec, rng)
    noise = rng.normal(0.0, spec.texture_noise_std, size=(3, h, w))

    image = np.full((3, h, w), script["background"], dtype=np.float64) + noise
    label = np.zeros((h, w), dtype=np.int64)
    for shape in script["shapes"]:
        mask = shape_mask(shape, h, w)
        color = np.clip(class_color(shape["cls"], spec.num_classes, shape["hue_offset"])
                        + shape["shade"], 0.0, 1.0)
        image[:, mask] = color[:, None]
        label[mask] = shape["cls"]
    return Sample(image=np.clip(image, 0.0, 1.0).astype(np.float32), label=label)


def generate_dataset(spec: SyntheticSceneSpec, count: int, start: int = 0) -> list[Sample]:
    return [generate_scene(spec, start + i) for i in range(count)]


def make_splits(samples: list[Sample], ratio: float, seed: int) -> DatasetSplit:
    """Partition fully labeled samples into labeled/unlabeled subsets.

    The unlabeled subset keeps its ground truth only in ``hidden_labels``
    for metric computation; training code receives label-free samples.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"split ratio must be in (0, 1), got {ratio}")
    if any(s.label is None for s in samples):
        raise ConfigurationError("make_splits requires fully labeled samples")
    n = len(samples)
    n_labeled = int(round(ratio * n))
    if n_labeled == 0:
        raise ConfigurationError(f"ratio {ratio} over {n} samples yields zero labeled samples")
    perm = np.random.default_rng(seed).permutation(n)
    labeled_idx = np.sort(perm[:n_labeled])
    unlabeled_idx = np.sort(perm[n_labeled:])
    labeled = [samples[i] for i in labeled_idx]
    unlabeled = [Sample(image=samples[i].image, label=None) for i in unlabeled_idx]
    hidden = [samples[i].label for i in unlabeled_idx]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, hidden_labels=hidden,
                        ratio=ratio, seed=seed)


def augment_shared(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Horizontal flip applied to image and label together (or neither)."""
    if rng.random() < cfg.flip_probability:
        image = np.ascontiguousarray(sample.image[:, :, ::-1])
        label = None if sample.label is None else np.ascontiguousarray(sample.label[:, ::-1])
        return Sample(image=image, label=label)
    return sample


def to_grayscale(image: np.ndarray) -> np.ndarray:
    gray = np.tensordot(_LUMA, image, axes=1)
    return np.repeat(gray[None], 3, axis=0)


def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return image + delta


def adjust_contrast(image: np.ndarray, delta: float) -> np.ndarray:
    mean = image.mean()
    return mean + (image - mean) * (1.0 + delta)


def adjust_saturation(image: np.ndarray, delta: float) -> np.ndarray:
    gray = to_grayscale(image)
    return gray + (image - gray) * (1.0 + delta)


def perturb_photometric(image: np.ndarray, cfg: AugmentationConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Color jitter plus random grayscale; purely photometric, output in [0, 1].

    The spatial layout never changes, so per-pixel correspondence with the
    unperturbed image is preserved.
    """
    out = image.astype(np.float64)
    if rng.random() < cfg.photometric_probability:
        out = adjust_brightness(out, rng.uniform(-cfg.brightness, cfg.brightness))
        out = adjust_contrast(out, rng.uniform(-cfg.contrast, cfg.contrast))
        out = adjust_saturation(out, rng.uniform(-cfg.saturation, cfg.saturation))
        if rng.random() < cfg.grayscale_probability:
            out = to_grayscale(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# Folder dataset format: images/<stem>.png (8-bit RGB) + labels/<stem>.png
# (8-bit single channel, pixel value = class index). A missing label file
# makes the sample unlabeled.

def save_folder_dataset(samples: list[Sample], root: Path | str) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        stem = f"{i:05d}"
        img = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{stem}.png")
        if sample.label is not None:
            Image.fromarray(sample.label.astype(np.uint8), mode="L").save(
                root / "labels" / f"{stem}.png")


def load_folder_dataset(root: Path | str, num_classes: int | None = None) -> list[Sample]:
    """Load a folder dataset, sorted by stem; label-less stems become unlabeled."""
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        return []
    samples = []
    for img_path in sorted(images_dir.glob("*.png")):
        stem = img_path.stem
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        image = image.transpose(2, 0, 1)
        label_path = root / "labels" / f"{stem}.png"
        label = None
        if label_path.exists():
            label = np.asarray(Image.open(label_path), dtype=np.int64)
            if label.ndim != 2:
                raise IngestionError(f"label for '{stem}' is not single-channel")
            if label.shape != image.shape[1:]:
                raise IngestionError(
                    f"image/label size mismatch for '{stem}': "
                    f"{image.shape[1:]} vs {label.shape}")
            if num_classes is not None and label.max() >= num_classes:
                raise IngestionError(
                    f"label for '{stem}' contains class {int(label.max())} "
                    f">= num_classes {num_classes}")
        samples.append(Sample(image=image, label=label))
    return samples


def write_manifest(path: Path | str, spec: SyntheticSceneSpec, num_images: int,
                   num_val: int = 0) -> None:
    """Record the synthetic recipe so a folder dataset stays reproducible."""
    payload = {"spec": asdict(spec), "num_images": num_images, "num_val": num_val}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path | str) -> tuple[SyntheticSceneSpec, int, int]:
    payload = json.loads(Path(path).read_text())
    raw = dict(payload["spec"])
    raw["image_size"] = tuple(raw["image_size"])
    raw["shapes_per_image"] = tuple(raw["shapes_per_image"])
    raw["shape_kinds"] = tuple(raw["shape_kinds"])
    return SyntheticSceneSpec(**raw), payload["num_images"], payload.get("num_val", 0)
