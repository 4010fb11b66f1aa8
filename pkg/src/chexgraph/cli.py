"""Command-line entry points: synth, train, eval, viz.

Settings come from (lowest to highest precedence) built-in defaults, an
optional flat key=value config file, and command-line flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset
from .evaluation import (DEFAULT_IOU_THRESHOLDS, accuracy_table, evaluate_model)
from .model import ModelConfig
from .synthetic import dump_dataset, generate_synthetic_dataset, load_dumped_dataset
from .training import ABLATION_MODES, TrainConfig, load_model, train
from .visualize import export_heatmap


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_TRAIN_KEYS = {
    "epochs": int, "lr0": float, "lr_decay_every": int, "lr_decay_factor": float,
    "momentum": float, "nesterov": lambda v: v.lower() in ("1", "true", "yes"),
    "weight_decay": float, "batch_size": int, "grid_loss_weight": float,
    "ablation": str, "seed": int, "grad_clip": float,
}
_MODEL_KEYS = {
    "image_size": int, "backbone": str, "head_hidden": int, "patch_count": int,
    "kr_patch_count": int, "slic_compactness": float, "slic_iterations": int,
}


def _apply_config(file_values: dict, args, train_kw: dict, model_kw: dict):
    for key, value in file_values.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _TRAIN_KEYS[key](value)
        elif key in _MODEL_KEYS:
            model_kw[key] = _MODEL_KEYS[key](value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    # CLI flags override file values.
    for key in ("ablation", "seed", "epochs", "batch_size"):
        flag = getattr(args, key, None)
        if flag is not None:
            train_kw[key] = flag
    if getattr(args, "image_size", None) is not None:
        model_kw["image_size"] = args.image_size


def _load_any_dataset(data_dir: Path, image_size: int):
    if (data_dir / "classes.txt").is_file() or (data_dir / "labels.csv").is_file():
        return load_dumped_dataset(data_dir, image_size=image_size)
    return load_dataset(data_dir / "images", data_dir / "labels.csv",
                        data_dir / "bboxes.csv", image_size=image_size)


def cmd_synth(args) -> int:
    dataset = generate_synthetic_dataset(
        seed=args.seed, n_images=args.n_images, num_classes=args.classes,
        image_size=args.image_size, source_size=args.source_size,
        fraction_annotated=args.fraction_annotated)
    dump_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    train_kw: dict = {}
    model_kw: dict = {}
    if args.config:
        _apply_config(parse_config_file(args.config), args, train_kw, model_kw)
    else:
        _apply_config({}, args, train_kw, model_kw)
    cfg = TrainConfig(**train_kw)
    image_size = model_kw.pop("image_size", 64)
    dataset = _load_any_dataset(Path(args.data_dir), image_size)
    train_set, _ = dataset.split(args.train_fraction)
    model_cfg = ModelConfig(image_size=image_size, num_classes=dataset.num_classes,
                            batch_size=cfg.batch_size, **model_kw)
    result = train(train_set, cfg, args.out, model_cfg=model_cfg,
                   resume_from=args.resume, cache_dir=args.cache_dir)
    print(f"trained {cfg.epochs} epochs ({cfg.ablation}); "
          f"final epoch mean loss {result.epoch_mean_loss[-1]:.4f}")
    print(f"log: {result.log_path}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, header = load_model(args.checkpoint)
    image_size = model.cfg.image_size
    dataset = _load_any_dataset(Path(args.data_dir), image_size)
    if dataset.num_classes != model.cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, checkpoint "
                         f"was trained with {model.cfg.num_classes}")
    train_set, held = dataset.split(args.train_fraction)
    subset = {"train": train_set, "heldout": held, "all": dataset}[args.split]
    results = evaluate_model(model, subset, tau=args.tau, upsample=args.upsample)
    table = accuracy_table(results, DEFAULT_IOU_THRESHOLDS, dataset.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "accuracy.csv")
    text = table.format_text()
    (out / "accuracy.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_viz(args) -> int:
    from .backbone import extract_features, predict_class_map, upsample_features

    model, _ = load_model(args.checkpoint)
    dataset = _load_any_dataset(Path(args.data_dir), model.cfg.image_size)
    train_set, held = dataset.split(args.train_fraction)
    subset = {"train": train_set, "heldout": held, "all": dataset}[args.split]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for s in subset.samples:
        if count >= args.limit:
            break
        if not s.boxes:
            continue
        pixels = s.pixels[None].astype(np.float32)
        fm = extract_features(pixels, model.backbone, model.backbone_cfg)
        if args.upsample > 1:
            fm = upsample_features(fm, args.upsample)
        probs = predict_class_map(fm, model.head).probs.data[0]
        for k in sorted({b.class_index for b in s.boxes}):
            stem = s.id.rsplit(".", 1)[0]
            export_heatmap(s, probs[k], s.boxes_of_class(k),
                           out / f"{stem}_{dataset.class_names[k]}.png")
        count += 1
    print(f"wrote heatmaps for {count} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chexgraph",
        description="Weakly-supervised lesion localization with relational graph losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--source-size", type=int, default=128)
    p.add_argument("--fraction-annotated", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--ablation", choices=sorted(ABLATION_MODES))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--cache-dir", help="cache superpixel hashes here between runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate localization accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--upsample", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="export prediction heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--upsample", type=int, default=1)
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as exit status, full trace not useful
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
