"""Hierarchical image encoder and feature distillation against the LVM teacher."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from lavide.errors import ShapeError, SizeError
from lavide.layers import ChannelNorm, PointwiseMLP

STRIDES = (4, 8, 16, 32)


class PatchMerge(nn.Module):
    """Overlapping strided convolution followed by channel norm."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        kernel = 7 if stride == 4 else 3
        self.proj = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.norm = ChannelNorm(c_out)

    def forward(self, x):
        return self.norm(self.proj(x))


class MixBlock(nn.Module):
    """Pre-norm residual block: depthwise 3x3 spatial mixing, then a pointwise MLP."""

    def __init__(self, channels: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = ChannelNorm(channels)
        self.mix = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.norm2 = ChannelNorm(channels)
        self.mlp = PointwiseMLP(channels, channels * mlp_ratio, channels)

    def forward(self, x):
        x = x + self.mix(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionEncoder(nn.Module):
    """Four-stage pyramid at strides 4, 8, 16, 32.

    Depthwise convolutions stand in for the attention mixers of a
    hierarchical transformer; the shape contract is the same.
    """

    def __init__(self, channels=(16, 32, 64, 128), mlp_ratio: int = 2, in_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        c_prev = in_channels
        for i, c in enumerate(self.channels):
            stages.append(
                nn.Sequential(
                    PatchMerge(c_prev, c, 4 if i == 0 else 2),
                    MixBlock(c, mlp_ratio),
                    MixBlock(c, mlp_ratio),
                    ChannelNorm(c),
                )
            )
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise SizeError(
                f"image size {h}x{w} must be a multiple of 32; pad to "
                f"{-(-h // 32) * 32}x{-(-w // 32) * 32}"
            )
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def vision_encode(image: torch.Tensor, encoder: VisionEncoder) -> list[torch.Tensor]:
    return encoder(image)


class DistillHead(nn.Module):
    """1x1 projection from the last pyramid width to the teacher width."""

    def __init__(self, c_in: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(c_in, embed_dim, 1)
        # positions where either vector was zero and cosine fell back to 0
        self.zero_vector_count = 0

    def forward(self, x):
        return self.proj(x)


def _safe_cosine(a: torch.Tensor, b: torch.Tensor, dim: int, eps: float = 1e-12):
    na = a.norm(dim=dim)
    nb = b.norm(dim=dim)
    degenerate = (na <= eps) | (nb <= eps)
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = (a * b).sum(dim=dim) / denom
    return torch.where(degenerate, torch.zeros_like(cos), cos), int(degenerate.sum())


def distill_features(final_feature: torch.Tensor, teacher: torch.Tensor, head: DistillHead,
                     mode: str = "spatial") -> torch.Tensor:
    """Mean of ``1 - cos(head(final_feature), teacher)``; lies in [0, 2].

    The teacher is detached. It is bilinearly resized if its grid differs
    from the student's. ``mode="pooled"`` compares spatially averaged
    vectors instead of individual positions.
    """
    teacher = teacher.detach()
    projected = head(final_feature)
    if projected.shape[1] != teacher.shape[1]:
        raise ShapeError(f"projected width {projected.shape[1]} != teacher width {teacher.shape[1]}")
    if teacher.shape[-2:] != projected.shape[-2:]:
        teacher = F.interpolate(teacher, size=projected.shape[-2:], mode="bilinear", align_corners=False)
    if mode == "pooled":
        projected = projected.mean(dim=(2, 3), keepdim=True)
        teacher = teacher.mean(dim=(2, 3), keepdim=True)
    elif mode != "spatial":
        raise ValueError(f"unknown distill mode {mode!r}")
    cos, n_zero = _safe_cosine(projected, teacher, dim=1)
    head.zero_vector_count += n_zero
    return (1.0 - cos).mean()
