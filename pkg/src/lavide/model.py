"""End-to-end change detector: map branch + vision branch + MoE discriminator."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from lavide.baselines import ColorPalette
from lavide.config import TrainConfig
from lavide.errors import ConfigError, LavideError, ShapeError
from lavide.losses import ContrastProjections
from lavide.map_branch import CategoryVocabulary, ObjectEncoder, OCOpt, category_table
from lavide.moe import MoEDiscriminator
from lavide.vision_branch import DistillHead, VisionEncoder


class ForwardOutput(NamedTuple):
    logits: torch.Tensor          # (B, 2, H, W)
    g_t: torch.Tensor             # (B, d, H, W)
    pyramid: list                 # 4 x (B, c_i, H/s_i, W/s_i)
    teacher: torch.Tensor | None  # (B, d, H/32, W/32)
    route_weights: list           # 4 x (B, N, H/s_i, W/s_i)


class TextMapEmbedding(nn.Module):
    """Gathers fixed prompt-ensemble embeddings per pixel; no trainable weights."""

    def __init__(self, table: np.ndarray):
        super().__init__()
        self.register_buffer("table", torch.as_tensor(np.array(table)))

    def forward(self, index_map: torch.Tensor) -> torch.Tensor:
        return self.table[index_map].permute(0, 3, 1, 2)


class ColorMapEmbedding(nn.Module):
    """Colour-rendered map lifted to the text width by a trainable 1x1 conv."""

    def __init__(self, palette: ColorPalette, embed_dim: int):
        super().__init__()
        self.register_buffer("colors", torch.as_tensor(palette.as_float()))
        self.lift = nn.Conv2d(3, embed_dim, 1)

    def forward(self, index_map: torch.Tensor) -> torch.Tensor:
        return self.lift(self.colors[index_map].permute(0, 3, 1, 2))


class LavideModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab: CategoryVocabulary, backend):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.backend = backend
        d = backend.embed_dim
        if d != cfg.lvm.embed_dim:
            raise ConfigError(f"backend embed_dim {d} != lvm.embed_dim {cfg.lvm.embed_dim}")
        K = len(vocab)
        self.num_categories = K
        if cfg.map.encoding == "language":
            self.map_embed = TextMapEmbedding(category_table(vocab, backend, cfg.map.prompts))
        else:
            self.map_embed = ColorMapEmbedding(ColorPalette.default(K), d)
        if cfg.map.ocopt:
            self.object_encoder = ObjectEncoder(K, cfg.map.d_obj, cfg.map.obj_hidden)
            self.ocopt = OCOpt(cfg.map.d_obj, d)
        else:
            self.object_encoder = None
            self.ocopt = None
        c = cfg.vision.channels
        self.vision = VisionEncoder(c, cfg.vision.mlp_ratio)
        self.distill_head = DistillHead(c[-1], d)
        self.moe = MoEDiscriminator(d, c, cfg.moe.num_experts, cfg.moe.hidden, cfg.moe.d_diff,
                                    cfg.fuse.d_fuse)
        self.contrast = ContrastProjections(d, c[-1], d)

    def teacher_features(self, images: torch.Tensor) -> torch.Tensor:
        """Frozen LVM image features for an NCHW batch, returned as a constant."""
        arrs = [self.backend.image_encode(im.detach().permute(1, 2, 0).cpu().numpy()) for im in images]
        t = torch.as_tensor(np.stack(arrs)).permute(0, 3, 1, 2)
        return t.to(images.dtype).contiguous()

    def map_features(self, index_map: torch.Tensor) -> torch.Tensor:
        """G_t (B, d, H, W) from an index map (B, H, W)."""
        text = self.map_embed(index_map)
        if self.ocopt is None:
            return text
        dtype = text.dtype
        onehot = torch.nn.functional.one_hot(index_map, self.num_categories).permute(0, 3, 1, 2).to(dtype)
        return self.ocopt(self.object_encoder(onehot), text)

    def forward(self, index_map: torch.Tensor, image: torch.Tensor, teacher=None,
                with_teacher: bool = True) -> ForwardOutput:
        if index_map.ndim != 3 or image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected maps (B, H, W) and images (B, 3, H, W), got "
                             f"{tuple(index_map.shape)} and {tuple(image.shape)}")
        if index_map.shape[-2:] != image.shape[-2:]:
            raise ShapeError("map and image sizes differ")
        if index_map.numel() and (int(index_map.min()) < 0 or int(index_map.max()) >= self.num_categories):
            raise ConfigError(f"map indices fall outside the {self.num_categories}-category vocabulary")
        stage = "map branch"
        try:
            g_t = self.map_features(index_map)
            stage = "vision branch"
            pyramid = self.vision(image)
            stage = "teacher"
            if teacher is None and with_teacher:
                teacher = self.teacher_features(image)
            stage = "moe discriminator"
            logits, weights = self.moe(g_t, pyramid, image.shape[-2:], return_weights=True)
        except LavideError as exc:
            exc.args = (f"[{stage}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
            raise
        return ForwardOutput(logits, g_t, pyramid, teacher, weights)

    @torch.no_grad()
    def predict(self, index_map: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        out = self.forward(index_map, image, with_teacher=False)
        return out.logits.argmax(dim=1).to(torch.uint8)


def build_model(cfg: TrainConfig, vocab: CategoryVocabulary, backend=None) -> LavideModel:
    """Seeded construction; the same config always yields the same initial weights."""
    from lavide.lvm_backend import load_backend

    backend = backend if backend is not None else load_backend(cfg.lvm)
    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    torch.manual_seed(cfg.train.seed)
    model = LavideModel(cfg, vocab, backend)
    return model.to(dtype)


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())
