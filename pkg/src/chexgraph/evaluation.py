"""Localization scoring: thresholded probability grids against ground-truth
boxes via pixel-level IoU, aggregated into per-class accuracy tables.

Predictions are discrete cell rectangles; both the predicted cells and the
ground-truth boxes are rasterized onto the image pixel lattice (a pixel
counts when its unit square overlaps the region with positive area) and IoU
is the ratio of the two pixel sets.  A (sample, class) pair with neither
predicted pixels nor box pixels scores 0 and is flagged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import extract_features, predict_class_map, upsample_features
from .data import BoxAnnotation, Dataset

DEFAULT_IOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class LocalizationResult:
    sample_id: str
    class_index: int
    iou: float
    both_empty: bool

    def correct(self, threshold: float) -> bool:
        return self.iou > threshold


def threshold_grid(probs, tau: float = 0.5) -> np.ndarray:
    """Binary cell mask: probability strictly greater than tau."""
    arr = probs.data if hasattr(probs, "data") and not isinstance(probs, np.ndarray) else probs
    return np.asarray(arr) > tau


def _paint_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Pixel index range [a, b) whose unit squares overlap [lo, hi) with
    positive area."""
    a = int(np.floor(lo + 1e-12))
    b = int(np.ceil(hi - 1e-12))
    return max(a, 0), min(b, limit)


def rasterize_cells(mask: np.ndarray, image_size: int) -> np.ndarray:
    """Paint each positive grid cell's pixel footprint onto a boolean canvas."""
    gh, gw = mask.shape
    cell_h = image_size / gh
    cell_w = image_size / gw
    canvas = np.zeros((image_size, image_size), dtype=bool)
    for i, j in zip(*np.nonzero(mask)):
        r0, r1 = _paint_span(i * cell_h, (i + 1) * cell_h, image_size)
        c0, c1 = _paint_span(j * cell_w, (j + 1) * cell_w, image_size)
        canvas[r0:r1, c0:c1] = True
    return canvas


def rasterize_boxes(boxes: list[BoxAnnotation], image_size: int) -> np.ndarray:
    canvas = np.zeros((image_size, image_size), dtype=bool)
    for box in boxes:
        r0, r1 = _paint_span(box.y, box.y + box.h, image_size)
        c0, c1 = _paint_span(box.x, box.x + box.w, image_size)
        canvas[r0:r1, c0:c1] = True
    return canvas


def iou_discrete(pred_mask: np.ndarray, gt_boxes: list[BoxAnnotation],
                 image_size: int) -> tuple[float, bool]:
    """Pixel-set IoU between predicted cells and ground-truth boxes.

    Returns (iou, both_empty); both-empty pairs are defined as 0.
    """
    pred = rasterize_cells(pred_mask, image_size)
    gt = rasterize_boxes(gt_boxes, image_size)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 0.0, True
    inter = int(np.logical_and(pred, gt).sum())
    return inter / union, False


def evaluate_model(model, dataset: Dataset, tau: float = 0.5,
                   upsample: int = 1, batch: int = 8) -> list[LocalizationResult]:
    """Score every (sample, class) pair that has ground-truth boxes."""
    model.eval()
    results = []
    size = dataset.image_size
    samples = dataset.samples
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        pixels = np.stack([s.pixels for s in chunk]).astype(np.float32)
        fm = extract_features(pixels, model.backbone, model.backbone_cfg)
        if upsample > 1:
            fm = upsample_features(fm, upsample)
        probs = predict_class_map(fm, model.head).probs.data
        for b, s in enumerate(chunk):
            for k in range(dataset.num_classes):
                boxes = s.boxes_of_class(k)
                if not boxes:
                    continue
                mask = threshold_grid(probs[b, k], tau)
                iou, both_empty = iou_discrete(mask, boxes, size)
                results.append(LocalizationResult(
                    sample_id=s.id, class_index=k, iou=iou, both_empty=both_empty))
    return results


@dataclass
class AccuracyTable:
    thresholds: tuple
    class_names: tuple
    accuracy: dict          # (threshold, class_index) -> float or None
    counts: dict            # class_index -> number of scored pairs
    mean: dict              # threshold -> float or None

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["T", "class", "accuracy", "n"])
            for t in self.thresholds:
                for k, name in enumerate(self.class_names):
                    acc = self.accuracy[(t, k)]
                    writer.writerow([t, name,
                                     "NA" if acc is None else f"{acc:.4f}",
                                     self.counts[k]])
                m = self.mean[t]
                writer.writerow([t, "Mean", "NA" if m is None else f"{m:.4f}",
                                 sum(self.counts.values())])
        return path

    def format_text(self) -> str:
        """Row-per-threshold table in the usual reporting layout."""
        header = ["T(IoU)"] + list(self.class_names) + ["Mean"]
        widths = [max(8, len(h) + 2) for h in header]
        lines = ["".join(h.ljust(w) for h, w in zip(header, widths))]
        for t in self.thresholds:
            cells = [f"{t:g}"]
            for k in range(len(self.class_names)):
                acc = self.accuracy[(t, k)]
                cells.append("NA" if acc is None else f"{acc:.4f}")
            m = self.mean[t]
            cells.append("NA" if m is None else f"{m:.4f}")
            lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines) + "\n"


def accuracy_table(results: list[LocalizationResult], thresholds,
                   class_names) -> AccuracyTable:
    """Fraction of scored pairs with IoU above each threshold, per class and
    averaged over classes with at least one scored pair."""
    thresholds = tuple(thresholds)
    class_names = tuple(class_names)
    by_class: dict[int, list[float]] = {k: [] for k in range(len(class_names))}
    for r in results:
        by_class[r.class_index].append(r.iou)
    accuracy = {}
    counts = {k: len(v) for k, v in by_class.items()}
    mean = {}
    for t in thresholds:
        per_class = []
        for k in range(len(class_names)):
            ious = by_class[k]
            if not ious:
                accuracy[(t, k)] = None
                continue
            acc = float(np.mean([iou > t for iou in ious]))
            accuracy[(t, k)] = acc
            per_class.append(acc)
        mean[t] = float(np.mean(per_class)) if per_class else None
    return AccuracyTable(thresholds=thresholds, class_names=class_names,
                         accuracy=accuracy, counts=counts, mean=mean)
