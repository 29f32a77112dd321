"""Networks: shared encoder, decoders with Seg/Proj heads, and the error nets.

Desk-scale replacements for the usual large segmentation backbones: a
3-stage strided conv encoder (total stride 8) and light decoders with
bilinear upsampling. The error localization net (ELN) is a small stride-4
encoder-decoder taking the channel stack [image | class probs | entropy].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError

ENCODER_STRIDE = 8
ELN_STRIDE = 4

# Validity probabilities are clamped strictly inside (0, 1) so binary
# cross-entropy stays finite even when the sigmoid saturates in float32.
VALIDITY_EPS = 1e-6


@dataclass
class SegModelConfig:
    num_classes: int = 4
    embedding_dim: int = 16
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    decoder_channels: int = 32
    num_aux_decoders: int = 2
    eln_channels: tuple[int, int] = (16, 32)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.embedding_dim < 1:
            raise ConfigurationError("model.embedding_dim must be >= 1")
        if len(self.encoder_channels) != 3:
            raise ConfigurationError("model.encoder_channels must list 3 stage widths")
        if self.num_aux_decoders < 0:
            raise ConfigurationError("model.num_aux_decoders must be >= 0")


@dataclass
class ForwardOutputs:
    """Per-decoder logits/probs (index 0 = main, 1..K = auxiliary) plus the
    main decoder's embedding map at its native resolution."""

    logits: list[Tensor]
    probs: list[Tensor]
    embedding: Tensor


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        _gn(out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Three stride-2 stages; output spatial size = input / 8."""

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        stages = []
        in_ch = 3
        for out_ch in channels:
            stages.append(_conv_block(in_ch, out_ch, stride=2))
            stages.append(_conv_block(out_ch, out_ch))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = in_ch

    def forward(self, images: Tensor) -> Tensor:
        h, w = images.shape[-2:]
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ValueError(f"input size {(h, w)} not divisible by encoder stride {ENCODER_STRIDE}")
        return self.stages(images)


def _head(in_ch: int, out_ch: int) -> nn.Sequential:
    # Two 1x1 convs with one ReLU in between.
    return nn.Sequential(
        nn.Conv2d(in_ch, in_ch, 1),
        nn.ReLU(inplace=True),
        nn.Conv2d(in_ch, out_ch, 1),
    )


class Decoder(nn.Module):
    """Light decoder: one 2x upsample trunk, then Seg and Proj heads.

    Both heads consume the same trunk output. Seg logits are bilinearly
    upsampled to the requested output size; the Proj embedding stays at the
    trunk's native resolution (input size / 4).
    """

    def __init__(self, in_ch: int, mid_ch: int, num_classes: int, embedding_dim: int):
        super().__init__()
        self.trunk = _conv_block(in_ch, mid_ch)
        self.seg_head = _head(mid_ch, num_classes)
        self.proj_head = _head(mid_ch, embedding_dim)

    def forward(self, features: Tensor, out_size: tuple[int, int]) -> tuple[Tensor, Tensor]:
        x = F.interpolate(features, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.trunk(x)
        logits = F.interpolate(self.seg_head(x), size=out_size, mode="bilinear",
                               align_corners=False)
        embedding = self.proj_head(x)
        return logits, embedding


class SegmentationModel(nn.Module):
    """Shared encoder + main decoder + K architecture-identical aux decoders.

    Auxiliary decoders consume detached encoder features, so no gradient
    from their losses ever reaches the encoder.
    """

    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_channels)
        self.decoder = Decoder(self.encoder.out_channels, cfg.decoder_channels,
                               cfg.num_classes, cfg.embedding_dim)
        self.aux_decoders = nn.ModuleList(
            Decoder(self.encoder.out_channels, cfg.decoder_channels,
                    cfg.num_classes, cfg.embedding_dim)
            for _ in range(cfg.num_aux_decoders)
        )

    def forward(self, images: Tensor, with_aux: bool = False) -> ForwardOutputs:
        out_size = images.shape[-2:]
        features = self.encoder(images)
        logits, embedding = self.decoder(features, out_size)
        all_logits = [logits]
        if with_aux:
            detached = features.detach()
            all_logits += [dec(detached, out_size)[0] for dec in self.aux_decoders]
        probs = [F.softmax(x, dim=1) for x in all_logits]
        return ForwardOutputs(logits=all_logits, probs=probs, embedding=embedding)

    def student_parameters(self):
        """Parameters of encoder + main decoder (the exported student)."""
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()


def softmax_and_entropy(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Class probabilities plus the per-pixel entropy map scaled to [0, 1].

    Entropy is -sum_c p_c ln p_c divided by ln C so the resulting channel is
    scale-comparable with the probability channels.
    """
    probs = F.softmax(logits, dim=1)
    return probs, entropy_map(probs)


def entropy_map(probs: Tensor) -> Tensor:
    c = probs.shape[1]
    plogp = probs * probs.clamp_min(1e-12).log()
    return (-plogp.sum(dim=1, keepdim=True)) / math.log(c)


def build_eln_input(image: Tensor, probs: Tensor, entropy: Tensor) -> Tensor:
    """Channel stack [image | probs | entropy]; 3 + C + 1 channels total."""
    if image.shape[-2:] != probs.shape[-2:] or image.shape[-2:] != entropy.shape[-2:]:
        raise ValueError(
            f"spatial mismatch: image {tuple(image.shape[-2:])}, "
            f"probs {tuple(probs.shape[-2:])}, entropy {tuple(entropy.shape[-2:])}")
    if entropy.shape[1] != 1:
        raise ValueError(f"entropy must have one channel, got {entropy.shape[1]}")
    return torch.cat([image, probs, entropy], dim=1)


class _ErrorNetTrunk(nn.Module):
    """Stride-4 encoder-decoder shared by the error nets; returns features
    at the input resolution."""

    def __init__(self, in_ch: int, widths: tuple[int, int]):
        super().__init__()
        w1, w2 = widths
        self.down1 = _conv_block(in_ch, w1, stride=2)
        self.down2 = _conv_block(w1, w2, stride=2)
        self.mid = _conv_block(w2, w2)
        self.up1 = _conv_block(w2, w1)
        self.up2 = _conv_block(w1, w1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % ELN_STRIDE or w % ELN_STRIDE:
            raise ValueError(f"input size {(h, w)} not divisible by stride {ELN_STRIDE}")
        x = self.down1(x)
        x = self.down2(x)
        x = self.mid(x)
        x = self.up1(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        x = self.up2(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        return x


class ErrorLocalizationNet(nn.Module):
    """Maps [image | probs | entropy] to a per-pixel validity probability.

    The first conv layer's channel count is tied to the number of classes
    (3 + C + 1 input channels); output is strictly inside (0, 1).
    """

    def __init__(self, num_classes: int, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = num_classes + 4
        self.trunk = _ErrorNetTrunk(self.in_channels, widths)
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, eln_input: Tensor) -> Tensor:
        if eln_input.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels "
                f"(3 + {self.num_classes} + 1), got {eln_input.shape[1]}")
        logits = self.head(self.trunk(eln_input))
        return torch.sigmoid(logits).clamp(VALIDITY_EPS, 1.0 - VALIDITY_EPS)


class ErrorCorrectionNet(nn.Module):
    """Baseline corrector: same input stack and trunk as the ELN, but the
    head emits a corrected class-probability map instead of a validity map."""

    def __init__(self, num_classes: int, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = num_classes + 4
        self.trunk = _ErrorNetTrunk(self.in_channels, widths)
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def forward(self, eln_input: Tensor) -> Tensor:
        if eln_input.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels "
                f"(3 + {self.num_classes} + 1), got {eln_input.shape[1]}")
        return F.softmax(self.head(self.trunk(eln_input)), dim=1)


def build_models(cfg: SegModelConfig, seed: int,
                 error_model: str = "eln") -> tuple[SegmentationModel, nn.Module]:
    """Construct the segmentation model and the chosen error net with
    deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    model = SegmentationModel(cfg)
    if error_model == "eln":
        err = ErrorLocalizationNet(cfg.num_classes, cfg.eln_channels)
    elif error_model == "secn":
        err = ErrorCorrectionNet(cfg.num_classes, cfg.eln_channels)
    else:
        raise ConfigurationError(f"unknown error_model '{error_model}'")
    return model, err
