"""Dataset types, preprocessing, box-to-grid projection, and CSV ingestion.

The on-disk format mirrors the public NIH chest X-ray release: a labels CSV
with (image id, pipe-separated finding labels) rows and an optional bounding
box CSV with (image id, finding label, x, y, w, h) rows, plus a directory of
PNG images.  Box coordinates in the CSV are in source-image pixels and are
rescaled to the working resolution at load time.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import read_png, resize_bilinear, to_chw

log = logging.getLogger(__name__)

# Findings of the NIH chest X-ray vocabulary; the first eight carry box
# annotations in the public release and are the ones evaluated.
NIH_CLASSES = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration",
    "Mass", "Nodule", "Pneumonia", "Pneumothorax",
    "Consolidation", "Edema", "Emphysema", "Fibrosis",
    "Pleural_Thickening", "Hernia",
)
NO_FINDING = "No Finding"

# The public BBox_List_2017.csv spells one finding differently from the
# labels file; normalize it on ingestion.
_LABEL_ALIASES = {"Infiltrate": "Infiltration"}


class DataFormatError(ValueError):
    """Fatal problem in an input file (missing file, unknown label, ...)."""


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned lesion box in working-image pixel coordinates."""

    class_index: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative box origin ({self.x}, {self.y})")


@dataclass(frozen=True)
class ImageSample:
    """One preprocessed image with its labels and (optional) boxes.

    ``has_box_annotation`` is the per-class supervision switch: 1 marks a
    class whose boxes may be used as grid-level supervision during training.
    """

    id: str
    pixels: np.ndarray              # [3, S, S] float32 in [0, 1]
    image_labels: np.ndarray        # [C] uint8
    boxes: tuple[BoxAnnotation, ...]
    has_box_annotation: np.ndarray  # [C] uint8

    def __post_init__(self):
        c = self.image_labels.shape[0]
        size = self.pixels.shape[-1]
        if self.pixels.shape != (3, size, size):
            raise ValueError(f"pixels must be [3, S, S], got {self.pixels.shape}")
        for box in self.boxes:
            if not (0 <= box.class_index < c):
                raise ValueError(f"box class {box.class_index} out of range")
            if not self.image_labels[box.class_index]:
                raise ValueError(f"box of class {box.class_index} on a sample "
                                 "not labeled positive for that class")
            if box.x + box.w > size + 1e-6 or box.y + box.h > size + 1e-6:
                raise ValueError("box exceeds image bounds")
        for k in range(c):
            if self.has_box_annotation[k] and not any(
                    b.class_index == k for b in self.boxes):
                raise ValueError(f"annotation flag set for class {k} without a box")
        self.pixels.flags.writeable = False
        self.image_labels.flags.writeable = False
        self.has_box_annotation.flags.writeable = False

    def boxes_of_class(self, k: int) -> list[BoxAnnotation]:
        return [b for b in self.boxes if b.class_index == k]


@dataclass(frozen=True)
class GridLabelMap:
    """Binary grid targets: 1 where a cell overlaps a projected box."""

    labels: np.ndarray  # [C, H, W] uint8
    grid_size: tuple[int, int]


@dataclass
class Dataset:
    samples: list[ImageSample]
    class_names: tuple[str, ...]
    image_size: int
    extra: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, train_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Deterministic split by sorted sample id: first fraction trains."""
        order = sorted(range(len(self.samples)), key=lambda i: self.samples[i].id)
        n_train = int(round(train_fraction * len(order)))
        train = [self.samples[i] for i in order[:n_train]]
        held = [self.samples[i] for i in order[n_train:]]
        return (Dataset(train, self.class_names, self.image_size),
                Dataset(held, self.class_names, self.image_size))


# -- preprocessing --------------------------------------------------------


def preprocess(image: np.ndarray, image_size: int,
               shift: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Canonicalize to [3, S, S] float32: unit range, bilinear resize, then
    the fixed affine normalization ``(x - shift) / scale``.

    With the default (identity) normalization the transform is idempotent.
    """
    chw = to_chw(image)
    chw = resize_bilinear(chw, image_size, image_size)
    chw = np.clip(chw, 0.0, 1.0)
    if shift != 0.0 or scale != 1.0:
        chw = (chw - shift) / scale
    return chw.astype(np.float32)


def scale_box(x: float, y: float, w: float, h: float,
              src_size: tuple[int, int], dst_size: int) -> tuple[float, float, float, float]:
    """Apply the same affine factors the image resize applies."""
    sh, sw = src_size
    fx = dst_size / sw
    fy = dst_size / sh
    return x * fx, y * fy, w * fx, h * fy


# -- box-to-grid projection ------------------------------------------------


def project_box_to_grid(box: BoxAnnotation, image_size: tuple[int, int],
                        grid_size: tuple[int, int]) -> set[tuple[int, int]]:
    """Cells (row, col) whose pixel footprint intersects the box with
    positive area; boundary touching does not count."""
    if box.w <= 0 or box.h <= 0:
        raise ValueError("degenerate box")
    img_h, img_w = image_size
    gh, gw = grid_size
    cell_h = img_h / gh
    cell_w = img_w / gw
    # Cell (i, j) covers [j*cw, (j+1)*cw) x [i*ch, (i+1)*ch); strict
    # inequalities implement the positive-area rule.
    i0 = max(0, int(np.floor(box.y / cell_h - 1e-12)))
    i1 = min(gh - 1, int(np.ceil((box.y + box.h) / cell_h + 1e-12)) - 1)
    j0 = max(0, int(np.floor(box.x / cell_w - 1e-12)))
    j1 = min(gw - 1, int(np.ceil((box.x + box.w) / cell_w + 1e-12)) - 1)
    cells = set()
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if (box.x < (j + 1) * cell_w and box.x + box.w > j * cell_w
                    and box.y < (i + 1) * cell_h and box.y + box.h > i * cell_h):
                cells.add((i, j))
    return cells


def make_grid_labels(sample: ImageSample, grid_size: tuple[int, int]) -> GridLabelMap:
    """Per-class union of projected boxes; all-zero channels where no box."""
    c = sample.image_labels.shape[0]
    size = sample.pixels.shape[-1]
    labels = np.zeros((c, *grid_size), dtype=np.uint8)
    for box in sample.boxes:
        for (i, j) in project_box_to_grid(box, (size, size), grid_size):
            labels[box.class_index, i, j] = 1
    return GridLabelMap(labels=labels, grid_size=grid_size)


# -- CSV ingestion ----------------------------------------------------------


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    return rows[1:]  # header row is mandatory


def load_dataset(image_dir, labels_csv, bbox_csv=None,
                 class_names=NIH_CLASSES, image_size: int = 512) -> Dataset:
    """Load an NIH-style dataset directory.

    Boxes are validated against the source image bounds; offending rows are
    skipped with a warning.  Unknown finding labels are fatal.
    """
    image_dir = Path(image_dir)
    labels_csv = Path(labels_csv)
    if not image_dir.is_dir():
        raise DataFormatError(f"image directory not found: {image_dir}")
    if not labels_csv.is_file():
        raise DataFormatError(f"labels CSV not found: {labels_csv}")
    class_names = tuple(class_names)
    index = {name: k for k, name in enumerate(class_names)}
    c = len(class_names)

    label_rows = _read_rows(labels_csv)
    box_rows_by_id: dict[str, list[tuple[int, int, float, float, float, float]]] = {}
    if bbox_csv is not None:
        bbox_csv = Path(bbox_csv)
        if not bbox_csv.is_file():
            raise DataFormatError(f"bbox CSV not found: {bbox_csv}")
        for rownum, row in enumerate(_read_rows(bbox_csv), start=2):
            image_id, finding = row[0].strip(), row[1].strip()
            finding = _LABEL_ALIASES.get(finding, finding)
            if finding not in index:
                raise DataFormatError(
                    f"{bbox_csv} row {rownum}: unknown finding label {finding!r}")
            x, y, w, h = (float(v) for v in row[2:6])
            box_rows_by_id.setdefault(image_id, []).append(
                (rownum, index[finding], x, y, w, h))

    samples = []
    for rownum, row in enumerate(label_rows, start=2):
        image_id = row[0].strip()
        finding_field = row[1].strip()
        labels = np.zeros(c, dtype=np.uint8)
        if finding_field != NO_FINDING:
            for name in finding_field.split("|"):
                name = name.strip()
                if name not in index:
                    raise DataFormatError(
                        f"{labels_csv} row {rownum}: unknown finding label {name!r}")
                labels[index[name]] = 1

        path = image_dir / image_id
        if path.suffix == "":
            path = path.with_suffix(".png")
        if not path.is_file():
            raise DataFormatError(f"image file not found: {path}")
        raw = read_png(path)
        src_h, src_w = raw.shape[:2]

        boxes = []
        lam = np.zeros(c, dtype=np.uint8)
        for (brow, k, x, y, w, h) in box_rows_by_id.get(image_id, []):
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > src_w + 1e-6 or y + h > src_h + 1e-6:
                log.warning("%s row %d: box (%s, %s, %s, %s) outside %dx%d image "
                            "%s; row skipped", bbox_csv, brow, x, y, w, h,
                            src_w, src_h, image_id)
                continue
            if not labels[k]:
                # A box implies the finding is present even if the labels CSV
                # omitted it; keep the two sources consistent.
                labels[k] = 1
            sx, sy, sw, sh = scale_box(x, y, w, h, (src_h, src_w), image_size)
            sw = min(sw, image_size - sx)
            sh = min(sh, image_size - sy)
            boxes.append(BoxAnnotation(k, sx, sy, sw, sh))
            lam[k] = 1

        samples.append(ImageSample(
            id=image_id,
            pixels=preprocess(raw, image_size),
            image_labels=labels,
            boxes=tuple(boxes),
            has_box_annotation=lam,
        ))
    return Dataset(samples=samples, class_names=class_names, image_size=image_size)
