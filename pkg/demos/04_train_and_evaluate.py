"""A small end-to-end run: train the combined model on synthetic data,
score held-out localization accuracy, and export a heatmap overlay.

This is a scaled-down version of the acceptance experiment (40 images,
3 epochs) so it finishes in well under a minute.

Run from the repository root:  python demos/04_train_and_evaluate.py
"""

import tempfile
from pathlib import Path

import numpy as np

from chexgraph import (accuracy_table, evaluate_model,
                       generate_synthetic_dataset)
from chexgraph.backbone import extract_features, predict_class_map
from chexgraph.evaluation import DEFAULT_IOU_THRESHOLDS
from chexgraph.training import TrainConfig, load_model, train
from chexgraph.visualize import export_heatmap

dataset = generate_synthetic_dataset(seed=7, n_images=40, fraction_annotated=0.25)
train_set, held = dataset.split(0.75)
print(f"training on {len(train_set)}, holding out {len(held)}")

with tempfile.TemporaryDirectory() as tmp:
    cfg = TrainConfig(epochs=3, seed=0, ablation="IR+IK+KR")
    result = train(train_set, cfg, Path(tmp) / "run")
    print(f"epoch mean losses: {[round(x, 2) for x in result.epoch_mean_loss]}")

    model, _ = load_model(result.final_checkpoint)
    scored = evaluate_model(model, held, tau=0.5)
    table = accuracy_table(scored, DEFAULT_IOU_THRESHOLDS, dataset.class_names)
    print()
    print(table.format_text())

    sample = next(s for s in held.samples if s.boxes)
    fm = extract_features(sample.pixels[None].astype(np.float32),
                          model.backbone, model.backbone_cfg)
    probs = predict_class_map(fm, model.head).probs.data[0]
    k = sample.boxes[0].class_index
    out = export_heatmap(sample, probs[k], sample.boxes_of_class(k),
                         Path(tmp) / "heatmap.png")
    print(f"wrote {out} ({out.stat().st_size} bytes); red = prediction, "
          f"green = ground-truth box")
