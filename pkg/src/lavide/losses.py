"""Change, contrastive and total objectives.

The distillation term lives in :mod:`lavide.vision_branch`.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from lavide.config import LossConfig
from lavide.errors import DataError, NonFiniteLossError, ShapeError
from lavide.moe import downsample_text_embedding


def _check_binary(gt: torch.Tensor):
    if gt.numel() and not bool(((gt == 0) | (gt == 1)).all()):
        raise DataError("change labels must be 0 or 1")


def change_loss(logits: torch.Tensor, gt: torch.Tensor, class_weights=None) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy.

    ``logits`` is (B, 2, H, W), ``gt`` is (B, H, W) with values in {0, 1}.
    With class weights the mean is normalised by the summed pixel weights.
    """
    if logits.shape[0] != gt.shape[0] or logits.shape[-2:] != gt.shape[-2:] or logits.shape[1] != 2:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match labels {tuple(gt.shape)}")
    _check_binary(gt)
    log_probs = torch.log_softmax(logits, dim=1)
    target = gt.long()
    nll = -log_probs.gather(1, target[:, None]).squeeze(1)
    if class_weights is None:
        return nll.mean()
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)[target]
    return (w * nll).sum() / w.sum().clamp_min(torch.finfo(logits.dtype).tiny)


def coarsen_labels(gt: torch.Tensor, size) -> torch.Tensor:
    """Max-pool a (B, H, W) change mask: a cell is changed if any pixel in it changed."""
    h, w = gt.shape[-2:]
    th, tw = size
    if h % th or w % tw:
        raise ShapeError(f"cannot coarsen {h}x{w} labels to {th}x{tw}")
    return F.max_pool2d(gt[:, None].to(torch.float64), kernel_size=(h // th, w // tw))[:, 0]


class ContrastProjections(nn.Module):
    """Bias-free 1x1 projections of the text and vision features to a shared width."""

    def __init__(self, c_text: int, c_vision: int, dim: int):
        super().__init__()
        self.text = nn.Conv2d(c_text, dim, 1, bias=False)
        self.vision = nn.Conv2d(c_vision, dim, 1, bias=False)


def contrast_loss(g_t: torch.Tensor, g_v4: torch.Tensor, gt: torch.Tensor, cfg: LossConfig,
                  projections: ContrastProjections) -> torch.Tensor:
    """Pull unchanged text/vision pairs together, push changed pairs below the margin.

    Per coarse cell: ``1 - cos`` when unchanged, ``max(0, cos - margin)`` when changed.
    """
    _check_binary(gt)
    size = g_v4.shape[-2:]
    text = downsample_text_embedding(g_t, size)
    labels = coarsen_labels(gt, size).to(g_v4.dtype)
    zt = F.normalize(projections.text(text), dim=1)
    zv = F.normalize(projections.vision(g_v4), dim=1)
    cos = (zt * zv).sum(dim=1)
    per_cell = (1.0 - labels) * (1.0 - cos) + labels * torch.clamp(cos - cfg.margin, min=0.0)
    return per_cell.mean()


def _is_finite(x) -> bool:
    return math.isfinite(float(x.detach()) if torch.is_tensor(x) else float(x))


def total_loss(l_change, l_distill, l_contrast, cfg: LossConfig):
    """``l_change + lambda1 * l_distill + lambda2 * l_contrast``.

    Raises :class:`NonFiniteLossError` naming the offending component.
    """
    parts = {"change": l_change, "distill": l_distill, "contrast": l_contrast}
    bad = [name for name, v in parts.items() if not _is_finite(v)]
    if bad:
        raise NonFiniteLossError(
            f"non-finite loss component(s): {', '.join(bad)}",
            {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()},
        )
    return l_change + cfg.lambda1 * l_distill + cfg.lambda2 * l_contrast
