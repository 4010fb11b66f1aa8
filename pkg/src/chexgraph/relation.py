"""Learnable cross-sample relation graph and its contrast-constrained loss.

The graph holds one raw weight per ordered batch-position pair.  Raw weights
are unconstrained trainable values; every use row-softmaxes them so the
weights of each row form a distribution, which keeps the weighted-distance
loss bounded below by zero while the relative weights stay learnable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class RelationGraph:
    """Trainable [n, n] similarity weights over batch positions."""

    weights: Tensor

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def init_relation_graph(n: int, dtype=np.float32) -> RelationGraph:
    """Fresh graph with every raw entry set to 1/n."""
    if n <= 0:
        raise ValueError(f"graph size must be positive, got {n}")
    return RelationGraph(weights=ad.parameter(np.full((n, n), 1.0 / n), dtype=dtype))


def feature_distance(f_u: Tensor, f_v: Tensor) -> Tensor:
    """Euclidean distance between two feature maps, flattened."""
    return ad.euclidean_distance(f_u, f_v)


def graph_weighted_distance(raw_weights: Tensor, features: list[Tensor]) -> Tensor:
    """(sum over pairs of row-softmax(raw)[u, v] * D(F_u, F_v)) / n^2.

    Diagonal pairs contribute zero distance but participate in the row
    normalization.  Gradients flow into the raw weights and the features.
    """
    n = len(features)
    if raw_weights.shape != (n, n):
        raise ValueError(f"graph is {raw_weights.shape}, batch has {n} features")
    norm = ad.softmax(raw_weights, axis=1)
    out = ad.tensor(np.zeros((), dtype=raw_weights.dtype))
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            out = out + norm[u, v] * feature_distance(features[u], features[v])
    return out * (1.0 / (n * n))


def inter_image_loss(graph: RelationGraph, features: list[Tensor]) -> Tensor:
    return graph_weighted_distance(graph.weights, features)
