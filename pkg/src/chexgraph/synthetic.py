"""Seeded synthetic chest-like images for desk-scale verification.

Each image is a fixed two-lung-field layout with per-class geometric
primitives (bright discs, dark bars) placed at random positions inside the
lung fields.  Every placed primitive is recorded as a ground-truth box;
the annotated fraction controls which samples expose those boxes as
training supervision.

The generator renders at a source resolution larger than the working
resolution so the real resize-and-rescale ingestion path is exercised, and
``dump_dataset`` writes the same PNG + CSV layout ``load_dataset`` reads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BoxAnnotation, Dataset, ImageSample, preprocess, scale_box
from .imageops import write_png


@dataclass(frozen=True)
class LesionSpec:
    """Geometry and appearance of one synthetic lesion class."""

    name: str
    kind: str             # "disc" or "bar"
    intensity: float      # drawn pixel value in [0, 1]
    min_extent: float     # fraction of source size
    max_extent: float


# Lesions are deliberately large relative to the coarse detection grid
# (Cardiomegaly-scale): a correct localizer can clear IoU 0.5 even though
# predictions are unions of grid cells, while firing on the whole frame
# still fails for the smaller draws.
DEFAULT_LESIONS = (
    LesionSpec(name="BrightDisc", kind="disc", intensity=0.95,
               min_extent=0.62, max_extent=0.86),
    LesionSpec(name="DarkBar", kind="bar", intensity=0.05,
               min_extent=0.70, max_extent=0.86),
)

# Lung fields as (x0, y0, x1, y1) fractions of the source frame.
_LUNG_FIELDS = ((0.08, 0.12, 0.44, 0.88), (0.56, 0.12, 0.92, 0.88))
# Lesions may sit anywhere in the thoracic region, not only inside a lung.
_PLACEMENT_FIELD = (0.04, 0.05, 0.96, 0.95)
_BACKGROUND = 0.15
_LUNG_VALUE = 0.45
_NOISE_SIGMA = 0.02


def _render_background(size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.full((size, size), _BACKGROUND)
    for (fx0, fy0, fx1, fy1) in _LUNG_FIELDS:
        x0, y0 = int(fx0 * size), int(fy0 * size)
        x1, y1 = int(fx1 * size), int(fy1 * size)
        img[y0:y1, x0:x1] = _LUNG_VALUE
    img += rng.normal(0.0, _NOISE_SIGMA, size=img.shape)
    return img


def _place_lesion(img: np.ndarray, spec: LesionSpec,
                  rng: np.random.Generator) -> tuple[float, float, float, float]:
    """Draw one primitive at a random position in the thoracic region.

    Returns the tight (x, y, w, h) box in source pixels.
    """
    size = img.shape[0]
    fx0, fy0, fx1, fy1 = (v * size for v in _PLACEMENT_FIELD)
    if spec.kind == "disc":
        r = 0.5 * size * rng.uniform(spec.min_extent, spec.max_extent)
        cx = rng.uniform(fx0 + r, fx1 - r)
        cy = rng.uniform(fy0 + r, fy1 - r)
        yy, xx = np.mgrid[0:size, 0:size]
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = spec.intensity
        return cx - r, cy - r, 2 * r, 2 * r
    if spec.kind == "bar":
        w = size * rng.uniform(spec.min_extent, spec.max_extent)
        h = w * rng.uniform(0.78, 0.95)
        if rng.random() < 0.5:
            w, h = h, w
        x = rng.uniform(fx0, fx1 - w)
        y = rng.uniform(fy0, fy1 - h)
        img[int(np.ceil(y)):int(np.floor(y + h)), int(np.ceil(x)):int(np.floor(x + w))] = spec.intensity
        return x, y, w, h
    raise ValueError(f"unknown lesion kind {spec.kind!r}")


def generate_synthetic_dataset(seed: int, n_images: int, num_classes: int = 2,
                               lesion_specs=DEFAULT_LESIONS,
                               image_size: int = 64, source_size: int = 128,
                               fraction_annotated: float = 0.2,
                               positive_rate: float = 0.6) -> Dataset:
    """Deterministic synthetic dataset of ``n_images`` samples.

    Every placed lesion is recorded as a ground-truth box.  A
    ``fraction_annotated`` share of the samples (chosen by seeded
    permutation) exposes its boxes as supervision; the rest carry only
    image-level labels.
    """
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    if num_classes > len(lesion_specs):
        raise ValueError(f"only {len(lesion_specs)} lesion specs defined, "
                         f"requested {num_classes} classes")
    specs = tuple(lesion_specs[:num_classes])
    rng = np.random.default_rng(seed)
    n_annotated = int(round(fraction_annotated * n_images))
    annotated = np.zeros(n_images, dtype=bool)
    annotated[rng.permutation(n_images)[:n_annotated]] = True

    samples = []
    source_images = {}
    source_boxes = {}
    for i in range(n_images):
        # NIH image ids carry the .png extension; mirror that so a dumped and
        # reloaded dataset has identical ids.
        sid = f"synth_{i:06d}.png"
        img = _render_background(source_size, rng)
        labels = np.zeros(num_classes, dtype=np.uint8)
        raw_boxes = []
        for k, spec in enumerate(specs):
            if rng.random() < positive_rate:
                labels[k] = 1
                raw_boxes.append((k, *_place_lesion(img, spec, rng)))
        img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

        boxes = []
        lam = np.zeros(num_classes, dtype=np.uint8)
        for (k, x, y, w, h) in raw_boxes:
            sx, sy, sw, sh = scale_box(x, y, w, h, (source_size, source_size), image_size)
            boxes.append(BoxAnnotation(k, sx, sy, min(sw, image_size - sx),
                                       min(sh, image_size - sy)))
            if annotated[i]:
                lam[k] = 1
        samples.append(ImageSample(
            id=sid,
            pixels=preprocess(img8, image_size),
            image_labels=labels,
            boxes=tuple(boxes),
            has_box_annotation=lam,
        ))
        source_images[sid] = img8
        source_boxes[sid] = raw_boxes

    dataset = Dataset(samples=samples,
                      class_names=tuple(s.name for s in specs),
                      image_size=image_size)
    dataset.extra["source_images"] = source_images
    dataset.extra["source_boxes"] = source_boxes
    dataset.extra["annotated_ids"] = [samples[i].id for i in range(n_images) if annotated[i]]
    return dataset


def dump_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNGs plus the labels/bbox CSVs ``load_dataset`` ingests.

    The bbox CSV records ground truth for every sample (evaluation needs
    it); ``annotated_ids.txt`` lists the samples whose boxes are meant to be
    used as training supervision, and ``classes.txt`` records the class
    vocabulary.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    source_images = dataset.extra.get("source_images")
    source_boxes = dataset.extra.get("source_boxes")
    if source_images is None:
        raise ValueError("dataset was not produced by generate_synthetic_dataset")

    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Labels"])
        for s in dataset.samples:
            names = [dataset.class_names[k] for k in np.flatnonzero(s.image_labels)]
            writer.writerow([s.id, "|".join(names) if names else "No Finding"])

    with open(out_dir / "bboxes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Label", "Bbox x", "y", "w", "h"])
        for s in dataset.samples:
            for (k, x, y, w, h) in source_boxes[s.id]:
                writer.writerow([s.id, dataset.class_names[k],
                                 f"{x:.4f}", f"{y:.4f}", f"{w:.4f}", f"{h:.4f}"])

    with open(out_dir / "classes.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(dataset.class_names) + "\n")

    with open(out_dir / "annotated_ids.txt", "w", encoding="utf-8") as fh:
        for sid in dataset.extra.get("annotated_ids", []):
            fh.write(sid + "\n")

    for s in dataset.samples:
        write_png(images_dir / s.id, source_images[s.id])
    return out_dir


def load_dumped_dataset(data_dir, image_size: int = 64,
                        apply_annotated_list: bool = True) -> Dataset:
    """Reload a dump through the real CSV ingestion path.

    When ``apply_annotated_list`` is set and ``annotated_ids.txt`` exists,
    samples outside the list get their supervision flags cleared (their
    boxes stay available for evaluation).
    """
    from .data import load_dataset  # local import avoids a cycle in docs builds

    data_dir = Path(data_dir)
    classes_file = data_dir / "classes.txt"
    if classes_file.is_file():
        class_names = tuple(line.strip() for line in
                            classes_file.read_text(encoding="utf-8").splitlines()
                            if line.strip())
    else:
        from .data import NIH_CLASSES
        class_names = NIH_CLASSES
    dataset = load_dataset(data_dir / "images", data_dir / "labels.csv",
                           data_dir / "bboxes.csv", class_names=class_names,
                           image_size=image_size)
    annotated_file = data_dir / "annotated_ids.txt"
    if apply_annotated_list and annotated_file.is_file():
        keep = {line.strip() for line in
                annotated_file.read_text(encoding="utf-8").splitlines() if line.strip()}
        for i, s in enumerate(dataset.samples):
            if s.id not in keep and s.has_box_annotation.any():
                lam = np.zeros_like(s.has_box_annotation)
                dataset.samples[i] = ImageSample(
                    id=s.id, pixels=s.pixels.copy(), image_labels=s.image_labels.copy(),
                    boxes=s.boxes, has_box_annotation=lam)
    return dataset
