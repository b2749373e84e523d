"""Procedural (pre-map, image, post-map, change) scenes and their on-disk layout.

Dataset directory::

    categories.json        ordered category names
    maps/<stem>.png        8-bit grayscale, pixel = category index (pre-change)
    images/<stem>.png      8-bit RGB rendering of the post-change state
    labels/<stem>.png      8-bit grayscale, 0 unchanged / 255 changed
    post_maps/<stem>.png   optional, same format as maps/
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from lavide.errors import ConfigError, DataError
from lavide.map_branch import CategoryVocabulary

_MASK64 = (1 << 64) - 1

LAND_COVER_NAMES = (
    "grassland", "water", "forest", "building", "farmland", "road",
    "bare soil", "wetland", "shrubland", "snow", "sand", "parking lot",
)

# Rendering colours of the simulated sensor, one per category.
LAND_COVER_COLORS = np.array([
    [0.55, 0.70, 0.35], [0.15, 0.30, 0.60], [0.10, 0.40, 0.15], [0.75, 0.45, 0.40],
    [0.85, 0.80, 0.45], [0.45, 0.45, 0.45], [0.60, 0.45, 0.30], [0.30, 0.55, 0.55],
    [0.40, 0.55, 0.25], [0.95, 0.95, 0.95], [0.90, 0.85, 0.65], [0.25, 0.25, 0.30],
])


def default_vocabulary(num_categories: int) -> CategoryVocabulary:
    names = [LAND_COVER_NAMES[i] if i < len(LAND_COVER_NAMES) else f"category {i}"
             for i in range(num_categories)]
    return CategoryVocabulary(tuple(names))


def category_colors(num_categories: int) -> np.ndarray:
    if num_categories <= len(LAND_COVER_COLORS):
        return LAND_COVER_COLORS[:num_categories]
    extra = np.random.default_rng(12345).uniform(0.05, 0.95, (num_categories - len(LAND_COVER_COLORS), 3))
    return np.concatenate([LAND_COVER_COLORS, extra])


@dataclass(frozen=True)
class SceneConfig:
    size: tuple[int, int] = (64, 64)
    num_categories: int = 4
    num_objects: int = 6
    change_rate: float = 0.3
    noise_sigma: float = 0.02
    texture_level: float = 0.5
    seed: int = 0
    # object half-extent range as fractions of the shorter side
    min_extent: float = 0.1
    max_extent: float = 0.25

    def validate(self):
        h, w = self.size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"scene size must be multiples of 32 and >= 32, got {h}x{w}")
        if self.num_categories < 1:
            raise ConfigError("num_categories must be >= 1")
        if self.num_categories < 2 and self.change_rate > 0:
            raise ConfigError("change injection needs at least 2 categories")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ConfigError("change_rate must lie in [0, 1]")
        if self.noise_sigma < 0 or not 0.0 <= self.texture_level <= 1.0:
            raise ConfigError("noise_sigma must be >= 0 and texture_level in [0, 1]")
        if self.num_objects < 0:
            raise ConfigError("num_objects must be >= 0")
        if not 0 < self.min_extent <= self.max_extent:
            raise ConfigError("need 0 < min_extent <= max_extent")


@dataclass
class SceneQuad:
    pre_map: np.ndarray   # (H, W) int64 category indices
    image: np.ndarray     # (H, W, 3) float64 in [0, 1]
    post_map: np.ndarray  # (H, W) int64
    change: np.ndarray    # (H, W) uint8 in {0, 1}


def _value_noise(rng, shape, cell: int = 8) -> np.ndarray:
    """Bilinearly interpolated random lattice in [-1, 1]."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, (gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _object_masks(rng, cfg: SceneConfig):
    h, w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w]
    short = min(h, w)
    masks = []
    for _ in range(cfg.num_objects):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(cfg.min_extent, cfg.max_extent, 2) * short
        if rng.random() < 0.5:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        masks.append(m)
    return masks


def _rasterize(masks, categories, shape):
    out = np.zeros(shape, dtype=np.int64)
    for m, c in zip(masks, categories):
        out[m] = c
    return out


def render_image(post_map: np.ndarray, num_categories: int, rng, texture_level: float,
                 noise_sigma: float) -> np.ndarray:
    colors = category_colors(num_categories)
    image = colors[post_map].copy()
    if texture_level > 0:
        for k in range(num_categories):
            tex = _value_noise(rng, post_map.shape) * (0.15 * texture_level)
            image += np.where(post_map == k, tex, 0.0)[..., None]
    if noise_sigma > 0:
        image += rng.normal(0.0, noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_scene(cfg: SceneConfig) -> SceneQuad:
    """Stamp objects over background 0, flip object categories, render the post state.

    Every random draw happens regardless of ``change_rate``, so for a fixed
    seed the set of flipped objects grows monotonically with the rate.
    """
    cfg.validate()
    K = cfg.num_categories
    rng = np.random.default_rng(cfg.seed & _MASK64)
    masks = _object_masks(rng, cfg)
    pre_cats = [int(rng.integers(1, K)) if K > 1 else 0 for _ in masks]
    flip_u = rng.random(len(masks))
    flip_offset = rng.integers(1, max(K, 2), len(masks))
    post_cats = [
        (c + int(off)) % K if u < cfg.change_rate else c
        for c, u, off in zip(pre_cats, flip_u, flip_offset)
    ]
    pre_map = _rasterize(masks, pre_cats, cfg.size)
    post_map = _rasterize(masks, post_cats, cfg.size)
    image = render_image(post_map, K, rng, cfg.texture_level, cfg.noise_sigma)
    change = (pre_map != post_map).astype(np.uint8)
    return SceneQuad(pre_map, image, post_map, change)


def generate_scenes(cfg: SceneConfig, count: int, workers: int = 1) -> list[SceneQuad]:
    """``count`` scenes with per-sample seeds ``cfg.seed + i``."""
    cfgs = [replace(cfg, seed=cfg.seed + i) for i in range(count)]
    if workers <= 1:
        return [generate_scene(c) for c in cfgs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(generate_scene, cfgs))


@dataclass
class Dataset:
    vocab: CategoryVocabulary
    stems: list[str]
    pre_maps: np.ndarray            # (N, H, W) int64
    images: np.ndarray              # (N, H, W, 3) float64
    labels: np.ndarray              # (N, H, W) uint8 in {0, 1}
    post_maps: np.ndarray | None = None

    def __len__(self):
        return len(self.stems)

    @classmethod
    def from_quads(cls, quads, vocab: CategoryVocabulary, stems=None) -> "Dataset":
        stems = list(stems or (f"scene_{i:04d}" for i in range(len(quads))))
        return cls(
            vocab=vocab,
            stems=stems,
            pre_maps=np.stack([q.pre_map for q in quads]),
            images=np.stack([q.image for q in quads]),
            labels=np.stack([q.change for q in quads]).astype(np.uint8),
            post_maps=np.stack([q.post_map for q in quads]),
        )

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(
            self.vocab, [self.stems[i] for i in idx], self.pre_maps[idx], self.images[idx],
            self.labels[idx], None if self.post_maps is None else self.post_maps[idx],
        )


def write_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    for sub in ("maps", "images", "labels") + (("post_maps",) if dataset.post_maps is not None else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    dataset.vocab.to_json(root / "categories.json")
    if len(dataset.vocab) > 256:
        raise DataError("8-bit map rasters hold at most 256 categories")
    for i, stem in enumerate(dataset.stems):
        Image.fromarray(dataset.pre_maps[i].astype(np.uint8)).save(root / "maps" / f"{stem}.png")
        rgb = np.round(np.clip(dataset.images[i], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{stem}.png")
        Image.fromarray((dataset.labels[i] * 255).astype(np.uint8)).save(root / "labels" / f"{stem}.png")
        if dataset.post_maps is not None:
            Image.fromarray(dataset.post_maps[i].astype(np.uint8)).save(
                root / "post_maps" / f"{stem}.png")
    return root


def _read_png(path: Path, stem: str, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"sample {stem!r}: missing {path.parent.name}/{path.name}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DataError(f"sample {stem!r}: {path} has mode {im.mode}, expected {mode}")
            return np.asarray(im)
    except OSError as exc:
        raise DataError(f"sample {stem!r}: unreadable {path} ({exc})") from exc


def read_dataset(directory, require_post_maps: bool = False) -> Dataset:
    root = Path(directory)
    if not (root / "categories.json").is_file():
        raise DataError(f"{root}: missing categories.json")
    vocab = CategoryVocabulary.from_json(root / "categories.json")
    stem_sets = {sub: {p.stem for p in (root / sub).glob("*.png")} for sub in ("maps", "images", "labels")}
    stems = sorted(set().union(*stem_sets.values()))
    if not stems:
        raise DataError(f"{root}: no samples found")
    has_post = (root / "post_maps").is_dir()
    if require_post_maps and not has_post:
        raise DataError(f"{root}: post_maps/ is required here but missing")
    pre, imgs, labels, posts = [], [], [], []
    shape = None
    for stem in stems:
        m = _read_png(root / "maps" / f"{stem}.png", stem, "L").astype(np.int64)
        im = _read_png(root / "images" / f"{stem}.png", stem, "RGB").astype(np.float64) / 255.0
        lb = _read_png(root / "labels" / f"{stem}.png", stem, "L")
        if not np.isin(lb, (0, 255)).all():
            raise DataError(f"sample {stem!r}: label values must be 0 or 255")
        if m.max(initial=0) >= len(vocab):
            raise DataError(f"sample {stem!r}: map index {m.max()} outside vocabulary of {len(vocab)}")
        if shape is None:
            shape = m.shape
        if m.shape != shape or im.shape[:2] != shape or lb.shape != shape:
            raise DataError(f"sample {stem!r}: raster sizes disagree")
        pre.append(m)
        imgs.append(im)
        labels.append((lb // 255).astype(np.uint8))
        if has_post:
            pm = _read_png(root / "post_maps" / f"{stem}.png", stem, "L").astype(np.int64)
            if pm.shape != shape:
                raise DataError(f"sample {stem!r}: post-map size disagrees")
            posts.append(pm)
    return Dataset(vocab, stems, np.stack(pre), np.stack(imgs), np.stack(labels),
                   np.stack(posts) if has_post else None)


def write_manifest(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
