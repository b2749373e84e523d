"""Optimisation loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from lavide.config import OptimConfig, TrainConfig
from lavide.errors import CheckpointError, DataError, NonFiniteLossError
from lavide.losses import change_loss, contrast_loss, total_loss
from lavide.map_branch import CategoryVocabulary
from lavide.model import LavideModel, build_model
from lavide.vision_branch import distill_features

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def lr_at(it: int, cfg: OptimConfig, max_iters: int | None = None) -> float:
    """Linear warmup from 0 to the peak rate, then polynomial decay to 0."""
    total = max_iters or cfg.max_iters
    warmup = int(round(cfg.warmup_fraction * total))
    peak = cfg.learning_rate
    if it < warmup:
        return peak * it / warmup
    frac = (it - warmup) / max(total - warmup, 1)
    return peak * max(1.0 - frac, 0.0) ** cfg.poly_power


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )


def batch_indices(seed: int, it: int, n: int, batch_size: int) -> list[int]:
    """Indices of batch ``it`` in a stream of per-epoch permutations.

    Depends only on (seed, it), so resumed runs see the same batches.
    """
    start = it * batch_size
    out = []
    perms: dict[int, np.ndarray] = {}
    for k in range(start, start + batch_size):
        epoch, pos = divmod(k, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed & ((1 << 64) - 1), epoch]).permutation(n)
        out.append(int(perms[epoch][pos]))
    return out


def to_tensor_images(images: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images)).permute(0, 3, 1, 2).to(dtype).contiguous()


@dataclass
class TrainState:
    model: LavideModel
    optimizer: torch.optim.AdamW
    iteration: int = 0
    loss_log: list = field(default_factory=list)

    @property
    def cfg(self) -> TrainConfig:
        return self.model.cfg


def init_state(cfg: TrainConfig, vocab: CategoryVocabulary, backend=None) -> TrainState:
    model = build_model(cfg, vocab, backend)
    return TrainState(model, make_optimizer(model, cfg.train))


@dataclass
class Batch:
    maps: torch.Tensor                   # (B, H, W) long
    images: torch.Tensor                 # (B, 3, H, W)
    labels: torch.Tensor                 # (B, H, W) long in {0, 1}
    teacher: torch.Tensor | None = None  # (B, d, H/32, W/32)


class TensorData:
    """A dataset converted once to tensors, with cached teacher features."""

    def __init__(self, dataset, model: LavideModel):
        dtype = next(model.parameters()).dtype
        self.dataset = dataset
        self.maps = torch.as_tensor(dataset.pre_maps, dtype=torch.long)
        self.images = to_tensor_images(dataset.images, dtype)
        self.labels = torch.as_tensor(dataset.labels, dtype=torch.long)
        self.teacher = model.teacher_features(self.images) if model.cfg.distill.enabled else None

    def __len__(self):
        return len(self.dataset)

    def batch(self, idx) -> Batch:
        return Batch(self.maps[idx], self.images[idx], self.labels[idx],
                     None if self.teacher is None else self.teacher[idx])


def compute_losses(model: LavideModel, batch: Batch, check_invariants: bool = False):
    """Forward pass and the three loss components; returns (total, parts, output)."""
    cfg = model.cfg
    out = model(batch.maps, batch.images, teacher=batch.teacher, with_teacher=cfg.distill.enabled)
    if check_invariants:
        check_forward_invariants(out, batch)
    l_change = change_loss(out.logits, batch.labels, cfg.loss.class_weights)
    if cfg.distill.enabled:
        l_distill = distill_features(out.pyramid[-1], out.teacher, model.distill_head, cfg.distill.mode)
    else:
        l_distill = out.logits.new_zeros(())
    l_contrast = contrast_loss(out.g_t, out.pyramid[-1], batch.labels, cfg.loss, model.contrast)
    total = total_loss(l_change, l_distill, l_contrast, cfg.loss)
    parts = {name: float(v.detach()) for name, v in
             (("change", l_change), ("distill", l_distill), ("contrast", l_contrast), ("total", total))}
    return total, parts, out


class InvariantViolation(AssertionError):
    pass


def check_forward_invariants(out, batch: Batch, tol: float = 1e-6):
    """Route weights are per-position simplices and all shapes follow the strides."""
    B, _, H, W = batch.images.shape
    if tuple(out.logits.shape) != (B, 2, H, W):
        raise InvariantViolation(f"logits shape {tuple(out.logits.shape)} != {(B, 2, H, W)}")
    for s, (feat, w) in enumerate(zip(out.pyramid, [r.detach() for r in out.route_weights])):
        stride = 4 * 2 ** s
        if tuple(feat.shape[-2:]) != (H // stride, W // stride):
            raise InvariantViolation(f"pyramid level {s} has shape {tuple(feat.shape)}")
        if tuple(w.shape[-2:]) != (H // stride, W // stride):
            raise InvariantViolation(f"route weights at level {s} have shape {tuple(w.shape)}")
        if bool((w < 0).any()) or float((w.sum(dim=1) - 1).abs().max()) > tol:
            raise InvariantViolation(f"route weights at level {s} are not a simplex")


def train_step(state: TrainState, batch: Batch, check_invariants: bool = False) -> dict:
    """One AdamW update at the scheduled rate; returns the loss components."""
    model, opt = state.model, state.optimizer
    lr = lr_at(state.iteration, state.cfg.train)
    for g in opt.param_groups:
        g["lr"] = lr
    model.train()
    opt.zero_grad(set_to_none=True)
    total, parts, _ = compute_losses(model, batch, check_invariants)
    total.backward()
    opt.step()
    parts = {"iter": state.iteration, "lr": lr, **parts}
    state.iteration += 1
    state.loss_log.append(parts)
    return parts


def train(dataset, cfg: TrainConfig, state: TrainState | None = None, backend=None, out_dir=None,
          check_invariants: bool = False, callback=None) -> TrainState:
    """Run (or resume) training until ``cfg.train.max_iters``.

    With ``out_dir`` the final checkpoint, periodic checkpoints and the loss log
    (``loss_log.json``) are written there.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    state = state or init_state(cfg, dataset.vocab, backend)
    data = TensorData(dataset, state.model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    every = cfg.train.checkpoint_every
    while state.iteration < cfg.train.max_iters:
        idx = batch_indices(cfg.train.seed, state.iteration, len(data), cfg.train.batch_size)
        try:
            parts = train_step(state, data.batch(idx), check_invariants)
        except NonFiniteLossError as exc:
            log.error("aborting at iteration %d: %s %s", state.iteration, exc, exc.components)
            raise
        if callback is not None:
            callback(state, parts)
        if out is not None and every and state.iteration % every == 0:
            save_checkpoint(state, out / f"checkpoint_{state.iteration:06d}.pt")
    if out is not None:
        save_checkpoint(state, out / "checkpoint.pt")
        (out / "loss_log.json").write_text(json.dumps(state.loss_log, indent=1) + "\n")
    return state


@torch.no_grad()
def predict_arrays(model: LavideModel, maps: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Binary change maps (N, H, W) for numpy index maps and (N, H, W, 3) images."""
    dtype = next(model.parameters()).dtype
    model.eval()
    preds = []
    for m, im in zip(maps, images):
        t_map = torch.as_tensor(np.asarray(m), dtype=torch.long)[None]
        t_img = to_tensor_images(np.asarray(im)[None], dtype)
        preds.append(model.predict(t_map, t_img)[0].numpy())
    return np.stack(preds)


def predict_dataset(model: LavideModel, dataset) -> np.ndarray:
    return predict_arrays(model, dataset.pre_maps, dataset.images)


def _manifest(model: torch.nn.Module) -> dict:
    return {k: list(v.shape) for k, v in model.state_dict().items()}


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "lavide",
        "config": state.cfg.to_dict(),
        "vocab": list(state.model.vocab.names),
        "manifest": _manifest(state.model),
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "loss_log": json.dumps(state.loss_log),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint_payload(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"checkpoint {path} is unreadable or truncated: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a lavide checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {payload['format_version']} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    return payload


def load_checkpoint(path, backend=None) -> TrainState:
    payload = read_checkpoint_payload(path)
    if payload.get("kind") != "lavide":
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, not a change detector")
    cfg = TrainConfig.from_dict(payload["config"])
    vocab = CategoryVocabulary(tuple(payload["vocab"]))
    state = init_state(cfg, vocab, backend)
    if _manifest(state.model) != payload["manifest"]:
        raise CheckpointError(f"{path}: parameter manifest does not match the configured model")
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.iteration = int(payload["iteration"])
    state.loss_log = json.loads(payload["loss_log"])
    return state


def save_segmentation_checkpoint(model, cfg: TrainConfig, vocab: CategoryVocabulary, path) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "segmentation",
        "config": cfg.to_dict(),
        "vocab": list(vocab.names),
        "manifest": _manifest(model),
        "model": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_segmentation_checkpoint(path):
    from lavide.baselines import SegmentationModel

    payload = read_checkpoint_payload(path)
    if payload.get("kind") != "segmentation":
        raise CheckpointError(f"{path} is not a segmentation checkpoint")
    cfg = TrainConfig.from_dict(payload["config"])
    vocab = CategoryVocabulary(tuple(payload["vocab"]))
    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    model = SegmentationModel(len(vocab), cfg.vision.channels, cfg.vision.mlp_ratio).to(dtype)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, vocab
