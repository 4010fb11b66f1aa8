"""The supervision losses and their gradients.

Grid-level BCE supervises box-annotated classes cell by cell; the
multiple-instance (MIL) loss supervises image-level classes through the
probability that at least one cell fires.  Every gradient in the package is
checked against central finite differences; this script shows the check on
both losses.

Run from the repository root:  python demos/02_losses_and_gradients.py
"""

import numpy as np

from chexgraph import autodiff as ad
from chexgraph import bce_grid_loss, mil_image_loss
from chexgraph.gradcheck import relative_gradient_error
from chexgraph.losses import base_loss

rng = np.random.default_rng(0)

# Grid BCE is a plain sum over cells.
probs = ad.tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
labels = np.array([[1, 0], [0, 1]])
print(f"grid BCE, well-matched prediction: {bce_grid_loss(probs, labels).item():.4f}")
print(f"grid BCE, inverted prediction:     "
      f"{bce_grid_loss(probs, 1 - labels).item():.4f}")

# The MIL loss only asks whether any cell fires.  For a positive image it
# falls as soon as one cell is confident; for a negative image every cell
# must stay low.
quiet = ad.tensor(np.full((4, 4), 0.02))
one_hot = np.full((4, 4), 0.02)
one_hot[1, 2] = 0.95
loud = ad.tensor(one_hot)
print(f"\nMIL y=1, all cells quiet:   {mil_image_loss(quiet, 1).item():.4f}")
print(f"MIL y=1, one confident cell: {mil_image_loss(loud, 1).item():.4f}")
print(f"MIL y=0, all cells quiet:   {mil_image_loss(quiet, 0).item():.4f}")
print(f"MIL y=0, one confident cell: {mil_image_loss(loud, 0).item():.4f}")

# On a single-cell grid the two losses coincide.
p = ad.tensor(np.array([[0.37]]))
print(f"\n1x1 grid: BCE {bce_grid_loss(p, np.array([[1]])).item():.6f} "
      f"== MIL {mil_image_loss(p, 1).item():.6f}")

# The combined supervision switches per (sample, class) on the annotation
# flag; box-annotated entries get the grid loss with a 4x balance weight.
leaf = ad.parameter(rng.uniform(0.1, 0.9, size=(2, 2, 2, 2)))
grid = (rng.random((2, 2, 2, 2)) > 0.5).astype(np.uint8)
img = np.ones((2, 2), dtype=np.uint8)
lam = np.array([[1, 0], [0, 1]], dtype=np.uint8)
loss = base_loss(leaf, grid, img, lam)
print(f"\ncombined batch loss: {loss.item():.4f}")

err = relative_gradient_error(lambda: base_loss(leaf, grid, img, lam), [leaf])
print(f"analytic vs finite-difference gradient, relative error: {err:.2e}")
