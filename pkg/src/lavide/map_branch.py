"""Map branch: categorical map -> text -> prompt-ensembled embeddings -> G_t.

Rasters use numpy channel-last layout (H, W) / (H, W, K); the trainable
modules take torch NCHW batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from lavide.errors import ConfigError, DataError, ShapeError
from lavide.layers import ConvBlock

PROMPT_TEMPLATES = (
    "There is the {} in the scene.",
    "A photo of the {} in the scene.",
    "A photo of the {}.",
    "The {}.",
    "The {} in the scene.",
    "A satellite photo of the {} in the scene.",
    "A satellite photo of the {}.",
)


@dataclass(frozen=True)
class CategoryVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ConfigError("vocabulary needs at least one category")
        if any(not isinstance(n, str) or not n.strip() for n in names):
            raise ConfigError("category names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate category names in {names}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_json(cls, path) -> "CategoryVocabulary":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, list):
            raise DataError(f"{path}: expected a JSON array of category names")
        return cls(tuple(data))

    def to_json(self, path):
        Path(path).write_text(json.dumps(list(self.names)) + "\n")


def as_index_map(cmap, num_categories: int | None = None) -> np.ndarray:
    """Resolve a one-hot/score map (H, W, K) or an index grid (H, W) to indices.

    Ties in a score map go to the lowest category index.
    """
    cmap = np.asarray(cmap)
    if cmap.ndim == 3:
        if num_categories is not None and cmap.shape[2] != num_categories:
            raise ConfigError(
                f"map has {cmap.shape[2]} channels but the vocabulary has {num_categories} categories"
            )
        return np.argmax(cmap, axis=2)
    if cmap.ndim != 2:
        raise ShapeError(f"categorical map must be (H, W) or (H, W, K), got {cmap.shape}")
    if not np.issubdtype(cmap.dtype, np.integer):
        raise DataError("index maps must hold integers")
    if num_categories is not None and cmap.size and (cmap.min() < 0 or cmap.max() >= num_categories):
        raise ConfigError(f"map indices fall outside [0, {num_categories})")
    return cmap.astype(np.int64, copy=False)


def one_hot(index_map: np.ndarray, num_categories: int) -> np.ndarray:
    return np.eye(num_categories, dtype=np.float64)[np.asarray(index_map)]


def convert_map_to_text(cmap, vocab: CategoryVocabulary) -> np.ndarray:
    """Per-pixel category name of the argmax channel, as an (H, W) object array."""
    idx = as_index_map(cmap, len(vocab))
    names = np.array(vocab.names, dtype=object)
    return names[idx]


def build_prompt_set(category: str) -> list[str]:
    if not category:
        raise ValueError("category must be a non-empty string")
    return [t.format(category) for t in PROMPT_TEMPLATES]


def _prompts_for(category: str, prompts: str) -> list[str]:
    all_prompts = build_prompt_set(category)
    if prompts == "ensemble":
        return all_prompts
    if len(prompts) == 2 and prompts[0] == "P" and prompts[1] in "1234567":
        return [all_prompts[int(prompts[1]) - 1]]
    raise ConfigError(f"unknown prompt selection {prompts!r}")


def ensemble_text_embedding(category: str, backend, prompts: str = "ensemble") -> np.ndarray:
    """Arithmetic mean of the prompt embeddings (not re-normalised).

    ``prompts`` is ``"ensemble"`` for all seven templates or ``"P1"``..``"P7"``
    for a single one.
    """
    vectors = [np.asarray(backend.text_encode(p), dtype=np.float64) for p in _prompts_for(category, prompts)]
    return np.mean(vectors, axis=0)


_TABLE_CACHE: dict[tuple, np.ndarray] = {}


def category_table(vocab: CategoryVocabulary, backend, prompts: str = "ensemble") -> np.ndarray:
    """(K, d) ensemble embeddings, computed once per (vocab, backend, prompts)."""
    ident = getattr(backend, "identity", None) or ("id", id(backend))
    key = (vocab.names, ident, prompts)
    table = _TABLE_CACHE.get(key)
    if table is None:
        table = np.stack([ensemble_text_embedding(c, backend, prompts) for c in vocab.names])
        table.setflags(write=False)
        _TABLE_CACHE[key] = table
    return table


def build_text_map(text_grid, vocab: CategoryVocabulary, backend, prompts: str = "ensemble") -> np.ndarray:
    """Gather per-pixel embeddings T (H, W, d) from a grid of category names."""
    grid = np.asarray(text_grid, dtype=object)
    lookup = {name: i for i, name in enumerate(vocab.names)}
    idx = np.empty(grid.shape, dtype=np.int64)
    for pos, name in np.ndenumerate(grid):
        k = lookup.get(name)
        if k is None:
            raise DataError(f"unknown category {name!r} at pixel {pos}")
        idx[pos] = k
    return category_table(vocab, backend, prompts)[idx]


class ObjectEncoder(nn.Module):
    """Shallow conv stack on the one-hot map: K -> hidden -> hidden -> d_obj."""

    def __init__(self, num_categories: int, d_obj: int = 32, hidden: int = 32):
        super().__init__()
        self.blocks = nn.Sequential(
            ConvBlock(num_categories, hidden),
            ConvBlock(hidden, hidden),
            ConvBlock(hidden, d_obj),
        )

    def forward(self, one_hot_map: torch.Tensor) -> torch.Tensor:
        return self.blocks(one_hot_map)


class OCOpt(nn.Module):
    """Fuses object embeddings into text embeddings.

    Three conv blocks over ``concat(O, T)``; the first block's output is added
    to the third block's output.
    """

    def __init__(self, d_obj: int, d_text: int):
        super().__init__()
        self.block1 = ConvBlock(d_obj + d_text, d_text)
        self.block2 = ConvBlock(d_text, d_text)
        self.block3 = ConvBlock(d_text, d_text)

    def forward(self, objects: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        if objects.shape[0] != text.shape[0] or objects.shape[-2:] != text.shape[-2:]:
            raise ShapeError(
                f"object map {tuple(objects.shape)} and text map {tuple(text.shape)} differ spatially"
            )
        first = self.block1(torch.cat([objects, text], dim=1))
        return self.block3(self.block2(first)) + first


def object_encode(cmap_one_hot: torch.Tensor, encoder: ObjectEncoder) -> torch.Tensor:
    if cmap_one_hot.ndim != 4:
        raise ShapeError("object_encode expects an (B, K, H, W) tensor")
    return encoder(cmap_one_hot)


def ocopt(objects: torch.Tensor, text: torch.Tensor, module: OCOpt) -> torch.Tensor:
    return module(objects, text)
