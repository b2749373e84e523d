"""Command-line entry point: ``lavide {gen-data,train,eval,ablate,render}``.

Exit codes: 0 success, 2 usage/config, 3 I/O or data, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from lavide.errors import CheckpointError, ConfigError, DataError, NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("lavide")


def _num_threads() -> int:
    raw = os.environ.get("LAVIDE_NUM_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LAVIDE_NUM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("LAVIDE_NUM_THREADS must be >= 1")
    return n


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _echo(title: str, payload: dict):
    print(json.dumps({title: payload}, sort_keys=True))


def _load_config(path, seed=None):
    from lavide.config import TrainConfig

    cfg = TrainConfig.from_json(path) if path else TrainConfig()
    if seed is not None:
        cfg = cfg.replace(**{"train.seed": seed})
    return cfg


def cmd_gen_data(args) -> int:
    from lavide.synthetic import Dataset, SceneConfig, default_vocabulary, generate_scenes, write_dataset, write_manifest

    scene = SceneConfig(size=args.size, num_categories=args.categories, num_objects=args.objects,
                        change_rate=args.change_rate, noise_sigma=args.noise, texture_level=args.texture,
                        seed=args.seed)
    scene.validate()
    if args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    manifest = {"scenes": args.scenes, **{k: (list(v) if isinstance(v, tuple) else v)
                                          for k, v in scene.__dict__.items()}}
    _echo("gen-data", manifest)
    quads = generate_scenes(scene, args.scenes, workers=_num_threads())
    dataset = Dataset.from_quads(quads, default_vocabulary(args.categories))
    out = write_dataset(dataset, args.out)
    write_manifest(out / "gen_manifest.json", manifest)
    print(f"wrote {len(dataset)} scenes to {out} (changed pixels: {dataset.labels.mean():.3f})")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from lavide.baselines import train_seg_head
    from lavide.synthetic import read_dataset
    from lavide.training import save_segmentation_checkpoint, train

    cfg = _load_config(args.config, args.seed)
    if args.baseline == "lavide-c":
        cfg = cfg.replace(**{"map.encoding": "color"})
    _echo("train", {"baseline": args.baseline, "config": cfg.to_dict()})
    dataset = read_dataset(args.data, require_post_maps=args.baseline == "category")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    if args.baseline == "category":
        seg_log = []
        model = train_seg_head(dataset, cfg, log=seg_log.append)
        save_segmentation_checkpoint(model, cfg, dataset.vocab, out / "checkpoint.pt")
        (out / "loss_log.json").write_text(json.dumps(seg_log, indent=1) + "\n")
        print(f"segmentation baseline trained for {len(seg_log)} iterations -> {out / 'checkpoint.pt'}")
        return EXIT_OK

    def progress(state, parts):
        if state.iteration % max(cfg.train.max_iters // 10, 1) == 0:
            print(f"iter {parts['iter']:5d}  lr {parts['lr']:.2e}  total {parts['total']:.4f}  "
                  f"change {parts['change']:.4f}  distill {parts['distill']:.4f}  "
                  f"contrast {parts['contrast']:.4f}", flush=True)

    torch.set_num_threads(_num_threads())
    state = train(dataset, cfg, out_dir=out, callback=progress)
    print(f"trained {state.iteration} iterations -> {out / 'checkpoint.pt'}")
    return EXIT_OK


def _predict_with_checkpoint(path, dataset):
    from lavide.baselines import category_change_maps
    from lavide.training import load_checkpoint, load_segmentation_checkpoint, predict_dataset, read_checkpoint_payload

    kind = read_checkpoint_payload(path).get("kind")
    if kind == "segmentation":
        model, _, vocab = load_segmentation_checkpoint(path)
        if vocab.names != dataset.vocab.names:
            raise DataError("dataset categories differ from the checkpoint vocabulary")
        return category_change_maps(model, dataset)
    state = load_checkpoint(path)
    if state.model.vocab.names != dataset.vocab.names:
        raise DataError("dataset categories differ from the checkpoint vocabulary")
    return predict_dataset(state.model, dataset)


def cmd_eval(args) -> int:
    import torch

    from lavide.evaluation import evaluate_predictions
    from lavide.synthetic import read_dataset

    torch.set_num_threads(_num_threads())
    _echo("eval", {"checkpoint": str(args.checkpoint), "data": str(args.data), "report": str(args.report)})
    dataset = read_dataset(args.data)
    preds = _predict_with_checkpoint(args.checkpoint, dataset)
    counts, m = evaluate_predictions(preds, dataset.labels)
    report = {**m, "samples": len(dataset),
              "counts": {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn}}
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    print("  ".join(f"{k} {100 * m[k]:.2f}" for k in ("f1", "iou", "recall", "precision")))
    return EXIT_OK


def cmd_ablate(args) -> int:
    import torch

    from lavide.evaluation import AblationSpec, run_ablation
    from lavide.synthetic import read_dataset

    spec = AblationSpec(args.axis, [v.strip() for v in args.values.split(",") if v.strip()]).validate()
    cfg = _load_config(args.config)
    _echo("ablate", {"axis": spec.axis, "values": spec.values, "config": cfg.to_dict()})
    dataset = read_dataset(args.data)
    torch.set_num_threads(_num_threads())
    report = run_ablation(spec, dataset, cfg, progress=lambda r: print(f"done {spec.axis}={r.value}: "
                                                                      f"F1 {100 * r.f1:.1f}", flush=True))
    report.to_json(args.report)
    text = report.to_text()
    Path(str(args.report) + ".txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_render(args) -> int:
    from PIL import Image

    from lavide.baselines import ColorPalette, render_map_color
    from lavide.evaluation import confusion_rgb
    from lavide.synthetic import read_dataset

    _echo("render", {"checkpoint": str(args.checkpoint), "data": str(args.data), "out": str(args.out)})
    dataset = read_dataset(args.data)
    preds = _predict_with_checkpoint(args.checkpoint, dataset)
    palette = ColorPalette.default(len(dataset.vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, stem in enumerate(dataset.stems):
        panels = [
            np.round(render_map_color(dataset.pre_maps[i], palette) * 255).astype(np.uint8),
            np.round(dataset.images[i] * 255).astype(np.uint8),
            confusion_rgb(preds[i], dataset.labels[i]),
        ]
        Image.fromarray(np.concatenate(panels, axis=1)).save(out / f"{stem}.png")
    print(f"rendered {len(dataset)} triptychs to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lavide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic map/image change dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--change-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--texture", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a change detector (or a baseline)")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline", choices=("category", "lavide-c"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one model per value of an ablation axis")
    p.add_argument("--axis", required=True, choices=("experts", "prompts", "map_encoding", "ocopt", "distill"))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,5,10,15")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="write map | image | prediction-vs-truth triptychs")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lavide {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"lavide {args.command}: numeric abort: {exc} {exc.components}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        print(f"lavide {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
