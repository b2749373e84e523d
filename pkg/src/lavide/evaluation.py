"""Confusion counts, change metrics and the ablation harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from lavide.config import PROMPT_CHOICES, TrainConfig
from lavide.errors import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts with "changed" as the positive class; shards merge with ``+``."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(x, name):
    a = np.asarray(x)
    if a.size and not np.isin(a, (0, 1)).all():
        raise DataError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def accumulate(pred, gt, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    new = ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )
    return new if counts is None else counts + new


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def metrics(counts: ConfusionCounts) -> dict[str, float]:
    """F1, IoU, recall and precision; any 0/0 is taken as 0."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    return {"f1": f1, "iou": iou, "recall": recall, "precision": precision}


def iou_from_f1(f1: float) -> float:
    """Binary IoU implied by an F1 score (both as fractions)."""
    return f1 / (2.0 - f1)


def evaluate_predictions(preds, labels) -> tuple[ConfusionCounts, dict[str, float]]:
    counts = ConfusionCounts()
    for p, g in zip(preds, labels):
        counts = accumulate(p, g, counts)
    return counts, metrics(counts)


# ---------------------------------------------------------------- ablations

AXES = ("experts", "prompts", "map_encoding", "ocopt", "distill")
_SWITCH = {"with": True, "without": False}


@dataclass
class AblationSpec:
    axis: str
    values: list

    def validate(self) -> "AblationSpec":
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ConfigError("ablation needs at least one value")
        for v in self.values:
            self.override(v)
        return self

    def override(self, value) -> dict:
        """Dotted config overrides selecting ``value`` on this axis."""
        if self.axis == "experts":
            try:
                n = int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"experts values must be positive integers, got {value!r}") from None
            if n < 1 or str(value).strip() != str(n):
                raise ConfigError(f"experts values must be positive integers, got {value!r}")
            return {"moe.num_experts": n}
        if self.axis == "prompts":
            if value not in PROMPT_CHOICES:
                raise ConfigError(f"prompts values must be among {PROMPT_CHOICES}, got {value!r}")
            return {"map.prompts": value}
        if self.axis == "map_encoding":
            if value not in ("language", "color"):
                raise ConfigError(f"map_encoding values must be 'language' or 'color', got {value!r}")
            return {"map.encoding": value}
        if value not in _SWITCH:
            raise ConfigError(f"{self.axis} values must be 'with' or 'without', got {value!r}")
        key = "map.ocopt" if self.axis == "ocopt" else "distill.enabled"
        return {key: _SWITCH[value]}


@dataclass
class AblationRow:
    value: str
    f1: float
    iou: float
    recall: float
    precision: float
    num_params: int
    final_loss: float


@dataclass
class AblationReport:
    axis: str
    rows: list[AblationRow]
    config: dict

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": [asdict(r) for r in self.rows], "config": self.config}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_text(self) -> str:
        header = ("value", "F1", "IoU", "Rec", "Pre", "params")
        lines = [[str(r.value), f"{100 * r.f1:.1f}", f"{100 * r.iou:.1f}", f"{100 * r.recall:.1f}",
                  f"{100 * r.precision:.1f}", str(r.num_params)] for r in self.rows]
        widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        out = [f"ablation over {self.axis}", fmt.format(*header)]
        out += [fmt.format(*l) for l in lines]
        return "\n".join(out)


def run_ablation(spec: AblationSpec, dataset, base_cfg: TrainConfig, eval_dataset=None,
                 backend=None, check_invariants: bool = True, progress=None) -> AblationReport:
    """Train one model per axis value under identical seeds and evaluate each.

    All values are validated before any training starts.
    """
    from lavide.model import count_parameters
    from lavide.training import predict_dataset, train

    spec.validate()
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    cfgs = [base_cfg.replace(**spec.override(v)) for v in spec.values]
    rows = []
    for value, cfg in zip(spec.values, cfgs):
        state = train(dataset, cfg, backend=backend, check_invariants=check_invariants)
        preds = predict_dataset(state.model, eval_dataset)
        _, m = evaluate_predictions(preds, eval_dataset.labels)
        row = AblationRow(str(value), m["f1"], m["iou"], m["recall"], m["precision"],
                          count_parameters(state.model), state.loss_log[-1]["total"])
        rows.append(row)
        if progress is not None:
            progress(row)
    return AblationReport(spec.axis, rows, base_cfg.to_dict())


# ---------------------------------------------------------------- rendering

CONFUSION_COLORS = {
    "tp": (255, 255, 255),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
    "tn": (0, 0, 0),
}


def confusion_rgb(pred, gt) -> np.ndarray:
    """(H, W, 3) uint8 overlay of a prediction on the ground truth."""
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & g] = CONFUSION_COLORS["tp"]
    out[p & ~g] = CONFUSION_COLORS["fp"]
    out[~p & g] = CONFUSION_COLORS["fn"]
    out[~p & ~g] = CONFUSION_COLORS["tn"]
    return out


def decode_confusion_rgb(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`confusion_rgb`: array of 'tp'/'fp'/'fn'/'tn' strings."""
    rgb = np.asarray(rgb)
    out = np.full(rgb.shape[:2], "", dtype="<U2")
    for name, color in CONFUSION_COLORS.items():
        out[(rgb == color).all(axis=-1)] = name
    if (out == "").any():
        raise DataError("overlay contains colours outside the confusion legend")
    return out
