"""Detection-head supervision: grid-level BCE and the image-level MIL loss.

Both losses are sums, not means, over grid cells; their per-class balance
weight (default 4 on the grid term) was tuned against that scale, so no
normalization is applied here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossReport:
    """The four loss components and their weighted total for one step."""

    l_base: float
    l_ir: float
    l_ik: float
    l_kr: float
    l_all: float

    def as_dict(self) -> dict:
        return {"l_base": self.l_base, "l_ir": self.l_ir, "l_ik": self.l_ik,
                "l_kr": self.l_kr, "l_all": self.l_all}


def bce_grid_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Sum over cells of -y log p - (1-y) log(1-p).

    log(1-p) goes through log1p so probabilities a few ULP below 1 keep
    their precision in float32.
    """
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    y = labels.astype(probs.dtype)
    term = ad.mul(ad.log(probs), y) + ad.mul(ad.log1p(-probs), 1.0 - y)
    return -term.sum()


def mil_image_loss(probs: Tensor, y: int) -> Tensor:
    """Image-level multiple-instance loss over a probability grid.

    The image is positive iff at least one cell fires:
    positive -> -log(1 - prod_j (1 - p_j)); negative -> -log prod_j (1 - p_j).
    The product lives in log space, and the positive branch uses expm1 so
    that 1 - prod(1-p) survives float32 when every p is tiny.
    """
    log_q = ad.log1p(-probs).sum()             # log prod_j (1 - p_j), <= 0
    if y:
        return -ad.log(-ad.expm1(log_q))
    return -log_q


def base_loss(probs: Tensor, grid_labels: np.ndarray, image_labels: np.ndarray,
              has_box_annotation: np.ndarray, grid_weight: float = 4.0) -> Tensor:
    """Combined supervision over a batch.

    Per (sample, class): box-annotated entries get the grid BCE scaled by
    ``grid_weight``; the rest get the MIL image loss.  The batch total is
    the plain double sum.
    """
    if grid_weight <= 0:
        raise ValueError("grid_weight must be positive")
    n, c = image_labels.shape
    if probs.shape[:2] != (n, c):
        raise ValueError(f"probs batch/class dims {probs.shape[:2]} != ({n}, {c})")
    out = ad.tensor(np.zeros((), dtype=probs.dtype))
    for i in range(n):
        for k in range(c):
            cell = probs[i, k]
            if has_box_annotation[i, k]:
                out = out + grid_weight * bce_grid_loss(cell, grid_labels[i, k])
            else:
                out = out + mil_image_loss(cell, int(image_labels[i, k]))
    return out
