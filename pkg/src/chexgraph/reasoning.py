"""Cross-image reasoning: bilinear affinity between spatial positions of an
image pair, column-softmax attention that highlights mutually similar
regions, and a loss over the attention-enhanced features.

The enhanced features feed only this loss; they are not routed back into
the detection head.  Codes derived from the enhanced features (block
pooling + median binarization) are treated as constants: gradients reach the
aggregating FC layer and, through the feature distances, the attention
parameters, but not through the binarization itself.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear
from .structure import PatchGraph


def affinity(f_u: Tensor, f_v: Tensor, w_p: Tensor) -> Tensor:
    """Position-pair similarity matrix: transpose(F_u) @ W_p @ F_v.

    ``f_u``/``f_v`` are channel-by-position matrices [c, HW]; the result is
    [HW, HW] and bilinear in the two feature maps.
    """
    c = w_p.shape[0]
    if f_u.shape[0] != c or f_v.shape[0] != c:
        raise ValueError(f"feature channels {f_u.shape[0]}/{f_v.shape[0]} do not "
                         f"match the {c}x{c} affinity parameter")
    return ad.matmul(ad.matmul(f_u.T, w_p), f_v)


def attend(f_u: Tensor, f_v: Tensor, aff: Tensor) -> tuple[Tensor, Tensor]:
    """Attention-enhanced features for both images of a pair.

    Each column of softmax(aff) is a distribution over positions of the
    first image, so every enhanced column is a convex combination of input
    columns; symmetrically for the transposed affinity.
    """
    att_u = ad.softmax(aff, axis=0)
    att_v = ad.softmax(aff.T, axis=0)
    return ad.matmul(f_u, att_u), ad.matmul(f_v, att_v)


def _tile_factors(m: int, h: int, w: int) -> tuple[int, int]:
    """Near-square (rows, cols) factorization of m that tiles an h x w grid."""
    best = None
    for mh in range(1, m + 1):
        if m % mh:
            continue
        mw = m // mh
        if h % mh == 0 and w % mw == 0:
            score = abs(mh - mw)
            if best is None or score < best[0]:
                best = (score, mh, mw)
    if best is None:
        raise ValueError(f"m={m} blocks cannot tile a {h}x{w} grid")
    return best[1], best[2]


def feature_block_codes(features: np.ndarray, m: int) -> np.ndarray:
    """Binary codes for m equal rectangular blocks of a [c, h, w] feature map.

    Each block is average-pooled to a c-vector and binarized against that
    vector's median (strictly greater -> 1).
    """
    c, h, w = features.shape
    mh, mw = _tile_factors(m, h, w)
    bh, bw = h // mh, w // mw
    pooled = features.reshape(c, mh, bh, mw, bw).mean(axis=(2, 4))  # [c, mh, mw]
    pooled = pooled.reshape(c, m).T                                 # [m, c]
    med = np.median(pooled, axis=1, keepdims=True)
    return (pooled > med).astype(np.uint8)


def enhanced_patch_graph(f_u, f_v, m: int, grid: tuple[int, int]) -> PatchGraph:
    """Hamming distances between block codes of two enhanced feature maps.

    ``f_u``/``f_v`` are [c, HW] tensors or arrays; ``grid`` restores the
    spatial layout.  The result carries no gradient graph.
    """
    h, w = grid
    fu = f_u.data if isinstance(f_u, Tensor) else np.asarray(f_u)
    fv = f_v.data if isinstance(f_v, Tensor) else np.asarray(f_v)
    codes_u = feature_block_codes(fu.reshape(-1, h, w), m)
    codes_v = feature_block_codes(fv.reshape(-1, h, w), m)
    values = (codes_u[:, None, :] != codes_v[None, :, :]).sum(axis=-1)
    return PatchGraph(values=values.astype(np.float64))


def reasoning_pass(features: list[Tensor], w_p: Tensor, aggregator: Linear,
                   m: int, grid: tuple[int, int]):
    """Run attention over every ordered batch pair.

    Returns the raw [n, n] weight matrix (aggregated enhanced-patch graphs)
    and the per-pair enhanced features keyed by (u, v).
    """
    n = len(features)
    c = features[0].shape[0]
    enhanced: dict[tuple[int, int], tuple[Tensor, Tensor]] = {}
    rows = []
    for u in range(n):
        for v in range(n):
            fpu, fpv = attend(features[u], features[v],
                              affinity(features[u], features[v], w_p))
            enhanced[(u, v)] = (fpu, fpv)
            graph = enhanced_patch_graph(fpu, fpv, m, grid)
            rows.append(graph.values.ravel() / max(c, 1))
    stacked = np.stack(rows).astype(aggregator.w.dtype)
    raw = aggregator(ad.tensor(stacked)).reshape((n, n))
    return raw, enhanced


def kr_loss(raw_weights: Tensor,
            enhanced: dict[tuple[int, int], tuple[Tensor, Tensor]]) -> Tensor:
    """(sum over pairs of row-softmax(raw)[u, v] * D(F'_u, F'_v)) / n^2."""
    n = raw_weights.shape[0]
    norm = ad.softmax(raw_weights, axis=1)
    out = ad.tensor(np.zeros((), dtype=raw_weights.dtype))
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            fpu, fpv = enhanced[(u, v)]
            out = out + norm[u, v] * ad.euclidean_distance(fpu, fpv)
    return out * (1.0 / (n * n))


def knowledge_reasoning_loss(features: list[Tensor], w_p: Tensor,
                             aggregator: Linear, m: int,
                             grid: tuple[int, int]) -> Tensor:
    raw, enhanced = reasoning_pass(features, w_p, aggregator, m, grid)
    return kr_loss(raw, enhanced)
