"""Mixture-of-experts discriminative module.

At each pyramid scale the (downsampled) text embedding and the vision
feature are concatenated. N per-position MLP experts compute difference
features, a depthwise-separable router weights them with a softmax, and the
four weighted differences are fused and classified per pixel.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from lavide.errors import ConfigError, ShapeError


def downsample_text_embedding(g_t: torch.Tensor, size) -> torch.Tensor:
    """Non-overlapping average pooling of (B, C, H, W) down to ``size``."""
    h, w = g_t.shape[-2:]
    th, tw = size
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ShapeError(f"cannot pool {h}x{w} to {th}x{tw}: target must divide the source")
    if (th, tw) == (h, w):
        return g_t
    return F.avg_pool2d(g_t, kernel_size=(h // th, w // tw))


class Router(nn.Module):
    """Depthwise 3x3 + pointwise 1x1 convolution emitting one logit per expert."""

    def __init__(self, c_in: int, num_experts: int):
        super().__init__()
        self.num_experts = num_experts
        self.depthwise = nn.Conv2d(c_in, c_in, 3, padding=1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, num_experts, 1)

    def logits(self, x):
        return self.pointwise(self.depthwise(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class ExpertBank(nn.Module):
    """N independent two-layer perceptrons stored as stacked weight tensors."""

    def __init__(self, c_in: int, num_experts: int, hidden: int = 64, d_diff: int = 32):
        super().__init__()
        self.num_experts = num_experts
        self.w1 = nn.Parameter(torch.empty(num_experts, c_in, hidden))
        self.b1 = nn.Parameter(torch.empty(num_experts, hidden))
        self.w2 = nn.Parameter(torch.empty(num_experts, hidden, d_diff))
        self.b2 = nn.Parameter(torch.empty(num_experts, d_diff))
        self.reset_parameters()

    def reset_parameters(self):
        for w, b in ((self.w1, self.b1), (self.w2, self.b2)):
            bound = 1.0 / math.sqrt(w.shape[1])
            nn.init.uniform_(w, -bound, bound)
            nn.init.uniform_(b, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, N, d_diff, H, W), one difference map per expert."""
        h = torch.einsum("bchw,nck->bnkhw", x, self.w1) + self.b1[None, :, :, None, None]
        h = F.gelu(h)
        return torch.einsum("bnkhw,nko->bnohw", h, self.w2) + self.b2[None, :, :, None, None]

    def expert(self, x: torch.Tensor, j: int) -> torch.Tensor:
        """Output of expert ``j`` alone, (B, d_diff, H, W)."""
        h = F.gelu(torch.einsum("bchw,ck->bkhw", x, self.w1[j]) + self.b1[j][None, :, None, None])
        return torch.einsum("bkhw,ko->bohw", h, self.w2[j]) + self.b2[j][None, :, None, None]


def _concat(g_t_i, g_v_i):
    if g_t_i.shape[0] != g_v_i.shape[0] or g_t_i.shape[-2:] != g_v_i.shape[-2:]:
        raise ShapeError(f"text {tuple(g_t_i.shape)} and vision {tuple(g_v_i.shape)} differ spatially")
    return torch.cat([g_t_i, g_v_i], dim=1)


def route_weights(g_t_i, g_v_i, router: Router, num_experts: int | None = None) -> torch.Tensor:
    if num_experts is not None and router.num_experts != num_experts:
        raise ConfigError(f"router emits {router.num_experts} weights but the bank has {num_experts} experts")
    return router(_concat(g_t_i, g_v_i))


def expert_difference(g_t_i, g_v_i, bank: ExpertBank, j: int) -> torch.Tensor:
    return bank.expert(_concat(g_t_i, g_v_i), j)


class MoEScale(nn.Module):
    """Router plus expert bank for one pyramid scale."""

    def __init__(self, c_text: int, c_vision: int, num_experts: int, hidden: int, d_diff: int):
        super().__init__()
        c_in = c_text + c_vision
        self.router = Router(c_in, num_experts)
        self.bank = ExpertBank(c_in, num_experts, hidden, d_diff)

    def forward(self, g_t_i, g_v_i, return_weights: bool = False):
        if self.router.num_experts != self.bank.num_experts:
            raise ConfigError("router and expert bank disagree on the number of experts")
        x = _concat(g_t_i, g_v_i)
        weights = self.router(x)
        diffs = self.bank(x)
        out = (weights[:, :, None] * diffs).sum(dim=1)
        if return_weights:
            return out, weights
        return out


def moe_difference(g_t_i, g_v_i, scale: MoEScale) -> torch.Tensor:
    return scale(g_t_i, g_v_i)


class FuseClassifier(nn.Module):
    """Upsample to stride 4, concatenate, fuse linearly, classify into 2 logits."""

    def __init__(self, d_diff: int, num_scales: int = 4, d_fuse: int = 64):
        super().__init__()
        self.num_scales = num_scales
        self.fuse = nn.Conv2d(d_diff * num_scales, d_fuse, 1)
        self.classifier = nn.Conv2d(d_fuse, 2, 1)

    def forward(self, diffs, out_size):
        if len(diffs) != self.num_scales or any(d is None for d in diffs):
            raise ConfigError(f"expected {self.num_scales} difference maps, got {len(diffs)}")
        base = diffs[0].shape[-2:]
        ups = [diffs[0]] + [
            F.interpolate(d, size=base, mode="bilinear", align_corners=False) for d in diffs[1:]
        ]
        fused = self.fuse(torch.cat(ups, dim=1))
        logits = self.classifier(fused)
        return F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)


def fuse_and_classify(diffs, head: FuseClassifier, out_size) -> torch.Tensor:
    return head(diffs, out_size)


class MoEDiscriminator(nn.Module):
    def __init__(self, c_text: int, vision_channels, num_experts: int = 10, hidden: int = 64,
                 d_diff: int = 32, d_fuse: int = 64):
        super().__init__()
        self.num_experts = num_experts
        self.scales = nn.ModuleList(
            MoEScale(c_text, c, num_experts, hidden, d_diff) for c in vision_channels
        )
        self.head = FuseClassifier(d_diff, len(vision_channels), d_fuse)

    def forward(self, g_t: torch.Tensor, pyramid, out_size=None, return_weights: bool = False):
        """Returns (B, 2, H, W) logits, plus per-scale route weights if requested."""
        if len(pyramid) != len(self.scales):
            raise ConfigError(f"expected {len(self.scales)} pyramid levels, got {len(pyramid)}")
        out_size = out_size or g_t.shape[-2:]
        diffs, weights = [], []
        for scale, g_v in zip(self.scales, pyramid):
            g_t_i = downsample_text_embedding(g_t, g_v.shape[-2:])
            d, w = scale(g_t_i, g_v, return_weights=True)
            diffs.append(d)
            weights.append(w)
        logits = self.head(diffs, out_size)
        if return_weights:
            return logits, weights
        return logits
