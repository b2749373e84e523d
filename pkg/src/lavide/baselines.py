"""Reference formulations: category discrimination and colour-encoded maps.

Category discrimination segments the image and compares labels with the
map. The colour variant (LaVIDE-C) keeps the full change detector but
replaces the text embedding of the map by a lifted colour rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from lavide.errors import ConfigError, DataError, ShapeError
from lavide.map_branch import as_index_map
from lavide.vision_branch import VisionEncoder

# Conventional land-use map colours, 8-bit RGB.
_MAP_COLORS = (
    (0, 0, 0), (0, 112, 255), (38, 115, 0), (255, 0, 0), (255, 255, 0), (156, 156, 156),
    (168, 112, 0), (0, 255, 197), (170, 255, 0), (255, 255, 255), (255, 170, 0), (115, 0, 76),
)


@dataclass(frozen=True)
class ColorPalette:
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        object.__setattr__(self, "colors", colors)
        if any(len(c) != 3 or not all(0 <= v <= 255 for v in c) for c in colors):
            raise ConfigError("palette entries must be [r, g, b] byte triples")
        if len(set(colors)) != len(colors):
            raise ConfigError("palette colours must be distinct")

    def __len__(self):
        return len(self.colors)

    def as_float(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64) / 255.0

    @classmethod
    def default(cls, num_categories: int) -> "ColorPalette":
        colors = list(_MAP_COLORS[:num_categories])
        i = 0
        while len(colors) < num_categories:
            c = ((i % 7) * 42, (i // 7 % 7) * 42, (i // 49 % 7) * 42)
            if c not in colors:
                colors.append(c)
            i += 1
        return cls(tuple(colors))

    @classmethod
    def from_json(cls, path) -> "ColorPalette":
        try:
            return cls(tuple(tuple(c) for c in json.loads(Path(path).read_text())))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: palette must be a JSON array of [r, g, b] triples") from exc

    def to_json(self, path):
        Path(path).write_text(json.dumps([list(c) for c in self.colors]) + "\n")


def render_map_color(cmap, palette: ColorPalette) -> np.ndarray:
    """(H, W, 3) float image in [0, 1] with each pixel painted its category colour."""
    idx = np.asarray(cmap)
    if idx.ndim == 3:
        if idx.shape[2] != len(palette):
            raise ConfigError(f"palette has {len(palette)} colours but the map has {idx.shape[2]} categories")
        idx = np.argmax(idx, axis=2)
    elif idx.size and (idx.min() < 0 or idx.max() >= len(palette)):
        raise ConfigError(f"map indices exceed the {len(palette)}-colour palette")
    return palette.as_float()[idx]


def parse_color_map(image: np.ndarray, palette: ColorPalette) -> np.ndarray:
    """Inverse of :func:`render_map_color` for exactly rendered images."""
    bytes_img = np.round(np.asarray(image) * 255).astype(np.int64)
    codes = bytes_img[..., 0] * 65536 + bytes_img[..., 1] * 256 + bytes_img[..., 2]
    lut = {r * 65536 + g * 256 + b: k for k, (r, g, b) in enumerate(palette.colors)}
    out = np.full(codes.shape, -1, dtype=np.int64)
    for code, k in lut.items():
        out[codes == code] = k
    if (out < 0).any():
        raise DataError("image contains colours outside the palette")
    return out


def category_discriminate(pred_seg, pre_map) -> np.ndarray:
    """Change wherever the segmented category differs from the map category."""
    a = np.asarray(pred_seg)
    b = np.asarray(pre_map)
    if a.shape != b.shape:
        raise ShapeError(f"segmentation {a.shape} and map {b.shape} differ")
    if a.ndim == 3:
        a, b = np.argmax(a, axis=2), np.argmax(b, axis=2)
    return (as_index_map(a) != as_index_map(b)).astype(np.uint8)


class SegmentationModel(nn.Module):
    """Vision encoder with a per-position linear K-class head on fused pyramid features."""

    def __init__(self, num_categories: int, channels=(16, 32, 64, 128), mlp_ratio: int = 2):
        super().__init__()
        self.num_categories = num_categories
        self.encoder = VisionEncoder(channels, mlp_ratio)
        self.head = nn.Conv2d(sum(channels), num_categories, 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(image)
        base = feats[0].shape[-2:]
        ups = [feats[0]] + [F.interpolate(f, size=base, mode="bilinear", align_corners=False) for f in feats[1:]]
        logits = self.head(torch.cat(ups, dim=1))
        return F.interpolate(logits, size=image.shape[-2:], mode="bilinear", align_corners=False)

    @torch.no_grad()
    def segment(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward(image).argmax(dim=1)


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def train_seg_head(dataset, cfg, iters: int | None = None, log=None) -> SegmentationModel:
    """Fit a segmentation model on the post-change labels of ``dataset``.

    Uses the run's vision/optimiser settings and the same batch schedule as
    the change detector.
    """
    from lavide.training import batch_indices, lr_at, make_optimizer, to_tensor_images

    if dataset.post_maps is None:
        raise DataError("the category-discrimination baseline needs post_maps/ in the dataset")
    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    torch.manual_seed(cfg.train.seed)
    model = SegmentationModel(len(dataset.vocab), cfg.vision.channels, cfg.vision.mlp_ratio).to(dtype)
    opt = make_optimizer(model, cfg.train)
    images = to_tensor_images(dataset.images, dtype)
    labels = torch.as_tensor(dataset.post_maps, dtype=torch.long)
    n_iter = iters or cfg.train.max_iters
    model.train()
    for it in range(n_iter):
        idx = batch_indices(cfg.train.seed, it, len(dataset), cfg.train.batch_size)
        for g in opt.param_groups:
            g["lr"] = lr_at(it, cfg.train, n_iter)
        opt.zero_grad(set_to_none=True)
        loss = segmentation_loss(model(images[idx]), labels[idx])
        loss.backward()
        opt.step()
        if log is not None:
            log({"iter": it, "seg_loss": float(loss.detach())})
    model.eval()
    return model


def segment_dataset(model: SegmentationModel, dataset) -> np.ndarray:
    from lavide.training import to_tensor_images

    dtype = next(model.parameters()).dtype
    images = to_tensor_images(dataset.images, dtype)
    return np.stack([model.segment(images[i:i + 1])[0].numpy() for i in range(len(dataset))])


def category_change_maps(model: SegmentationModel, dataset) -> np.ndarray:
    seg = segment_dataset(model, dataset)
    return np.stack([category_discriminate(s, m) for s, m in zip(seg, dataset.pre_maps)])


def lavide_c_variant(cmap, image, model) -> np.ndarray:
    """Change map from a colour-encoded model (``map.encoding == "color"``)."""
    if model.cfg.map.encoding != "color":
        raise ConfigError("lavide_c_variant needs a model built with map.encoding = 'color'")
    from lavide.training import predict_arrays

    return predict_arrays(model, np.asarray(cmap)[None], np.asarray(image)[None])[0]
