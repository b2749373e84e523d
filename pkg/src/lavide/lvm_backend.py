"""Language-vision model backends.

A backend exposes ``embed_dim``, ``text_encode(str) -> (d,)`` and
``image_encode((H, W, 3)) -> (ceil(H/32), ceil(W/32), d)``; every output
vector is unit length. The toy backend is seeded and frozen so the whole
package runs offline. Real pretrained encoders can be wrapped behind the same
three members and loaded with ``lvm.backend = "external"``.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from lavide.errors import ConfigError, SizeError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Stride-2 stages of the frozen toy image encoder; the last width is embed_dim.
TOY_IMAGE_WIDTHS = (16, 32, 64, 64)


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 bytes of ``text``."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@runtime_checkable
class LvmBackend(Protocol):
    embed_dim: int

    def text_encode(self, prompt: str) -> np.ndarray: ...

    def image_encode(self, image: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ToyLvmConfig:
    seed: int = 0
    embed_dim: int = 64


def _unit(v: np.ndarray, axis=-1) -> np.ndarray:
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def token_vector(token: str, cfg: ToyLvmConfig) -> np.ndarray:
    rng = np.random.default_rng([fnv1a64(token), cfg.seed & _MASK64])
    return rng.uniform(-1.0, 1.0, cfg.embed_dim)


def toy_text_encode(prompt: str, cfg: ToyLvmConfig) -> np.ndarray:
    """Mean of per-token random vectors, L2-normalised.

    Tokens are the lowercased whitespace-split words. An empty prompt maps to
    the vector of the empty-string token.
    """
    tokens = prompt.lower().split() or [""]
    return _unit(np.mean([token_vector(t, cfg) for t in tokens], axis=0))


def toy_image_weights(cfg: ToyLvmConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Frozen (weight, bias) pairs for the five stride-2 3x3 convolutions."""
    rng = np.random.default_rng([0x7E57, cfg.seed & _MASK64])
    widths = (3,) + TOY_IMAGE_WIDTHS + (cfg.embed_dim,)
    layers = []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(c_out, c_in, 3, 3))
        b = rng.uniform(-0.1, 0.1, size=c_out)
        layers.append((w, b))
    return layers


class ToyLvmBackend:
    """Deterministic stand-in for a pretrained language-vision model."""

    def __init__(self, cfg: ToyLvmConfig | None = None):
        self.cfg = cfg or ToyLvmConfig()
        if self.cfg.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        self.embed_dim = self.cfg.embed_dim
        self._layers = toy_image_weights(self.cfg)
        for w, b in self._layers:
            w.setflags(write=False)
            b.setflags(write=False)
        self._torch_layers = [(torch.tensor(w), torch.tensor(b)) for w, b in self._layers]

    @property
    def identity(self) -> tuple:
        return ("toy", self.cfg.seed, self.cfg.embed_dim)

    @property
    def frozen_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._layers

    def text_encode(self, prompt: str) -> np.ndarray:
        return toy_text_encode(prompt, self.cfg)

    def image_encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise SizeError(f"expected an (H, W, 3) image, got shape {image.shape}")
        if image.shape[0] < 32 or image.shape[1] < 32:
            raise SizeError(f"image must be at least 32x32, got {image.shape[0]}x{image.shape[1]}")
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64).transpose(2, 0, 1))[None]
        with torch.no_grad():
            for w, b in self._torch_layers:
                x = torch.tanh(F.conv2d(x, w, b, stride=2, padding=1))
        return _unit(x[0].permute(1, 2, 0).numpy())


def load_backend(lvm_cfg) -> LvmBackend:
    """Build the backend named by an ``LvmConfig``."""
    if lvm_cfg.backend == "toy":
        return ToyLvmBackend(ToyLvmConfig(seed=lvm_cfg.seed, embed_dim=lvm_cfg.embed_dim))
    if lvm_cfg.backend == "external":
        if not lvm_cfg.factory or ":" not in lvm_cfg.factory:
            raise ConfigError("lvm.factory must look like 'package.module:callable'")
        module_name, _, attr = lvm_cfg.factory.partition(":")
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load external backend {lvm_cfg.factory!r}: {exc}") from exc
        backend = factory()
        if not isinstance(backend, LvmBackend):
            raise ConfigError(f"{lvm_cfg.factory!r} did not return an LvmBackend")
        if backend.embed_dim != lvm_cfg.embed_dim:
            raise ConfigError(
                f"external backend embed_dim {backend.embed_dim} != lvm.embed_dim {lvm_cfg.embed_dim}"
            )
        return backend
    raise ConfigError(f"unknown lvm.backend {lvm_cfg.backend!r}")
