"""Finite-difference verification of analytic gradients.

The checker perturbs every element of every leaf tensor and compares the
central difference of the scalar objective against the gradient produced by
:meth:`Tensor.backward`.  The finite-difference side only ever calls the
forward function, so it is independent of the backward implementation it
verifies.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def finite_difference_grad(f: Callable[[], Tensor], leaf: Tensor,
                           step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f()`` with respect to ``leaf``.

    ``f`` must rebuild its forward pass from ``leaf.data`` on every call.
    """
    grad = np.zeros_like(leaf.data, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        hi = float(f().data)
        flat[i] = orig - h
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_gradient_error(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                            step: float = 1e-6, scale_floor: float = 1e-3) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    Per leaf the error is ``||g_a - g_fd|| / max(||g_a||, ||g_fd||, floor)``;
    the maximum over all leaves is returned.  The floor keeps parameters the
    objective is invariant to (true gradient exactly zero, both sides pure
    roundoff) from reading as 100% error.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = finite_difference_grad(f, leaf, step=step)
        delta = np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric)
        scale = max(np.linalg.norm(np.asarray(analytic, dtype=np.float64)),
                    np.linalg.norm(numeric), scale_floor)
        worst = max(worst, delta / scale)
    return worst
