"""Heatmap overlays: grayscale input, red semi-transparent predicted region,
green ground-truth box outlines."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ImageSample
from .evaluation import rasterize_cells, threshold_grid
from .imageops import write_png

_RED = np.array([220, 40, 40], dtype=np.float64)
_GREEN = np.array([40, 200, 60], dtype=np.float64)
_ALPHA = 0.45
_OUTLINE = 2


def export_heatmap(sample: ImageSample, probs, gt_boxes, out_path,
                   tau: float = 0.5) -> Path:
    out_path = Path(out_path)
    size = sample.pixels.shape[-1]
    gray = np.clip(sample.pixels.mean(axis=0), 0.0, 1.0) * 255.0
    canvas = np.repeat(gray[:, :, None], 3, axis=2)

    mask = threshold_grid(probs, tau)
    region = rasterize_cells(mask, size)
    canvas[region] = (1.0 - _ALPHA) * canvas[region] + _ALPHA * _RED

    for box in gt_boxes:
        r0 = int(np.clip(np.floor(box.y), 0, size - 1))
        r1 = int(np.clip(np.ceil(box.y + box.h), 1, size))
        c0 = int(np.clip(np.floor(box.x), 0, size - 1))
        c1 = int(np.clip(np.ceil(box.x + box.w), 1, size))
        t = _OUTLINE
        canvas[r0:min(r0 + t, size), c0:c1] = _GREEN
        canvas[max(r1 - t, 0):r1, c0:c1] = _GREEN
        canvas[r0:r1, c0:min(c0 + t, size)] = _GREEN
        canvas[r0:r1, max(c1 - t, 0):c1] = _GREEN

    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_png(out_path, np.round(canvas).astype(np.uint8))
    return out_path
