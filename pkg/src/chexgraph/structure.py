"""Structural patch graphs: SLIC superpixels, perceptual patch hashes,
Hamming patch-pair graphs, and their learned aggregation into a
cross-sample weight matrix.

SLIC here is the classic locality-restricted k-means over (intensity, x, y)
with grid-seeded centers.  Patch appearance is summarized by an average
hash (8x8 downsample, threshold against the median), so visually similar
patches land at small Hamming distance.  A fully connected layer maps each
pair's flattened Hamming matrix to a single scalar; batch pairs assemble
into an [n, n] matrix that drives the same weighted-distance loss as the
inter-image graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .imageops import resize_bilinear
from .nn import Linear
from .relation import graph_weighted_distance

HASH_BITS = 64
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class PatchSet:
    """Partition of an image into superpixel patches.

    Labels are contiguous 0..m-1, sorted by patch centroid (row-major), and
    every patch is non-empty.
    """

    label_map: np.ndarray  # [H, W] int
    m: int


@dataclass(frozen=True)
class PatchHashes:
    codes: np.ndarray  # [m] uint64


@dataclass(frozen=True)
class PatchGraph:
    """Pairwise patch distances between two images (entries >= 0)."""

    values: np.ndarray  # [m_i, m_j] float


# -- SLIC ------------------------------------------------------------------


def slic_superpixels(image: np.ndarray, m: int, compactness: float = 0.2,
                     iterations: int = 10) -> PatchSet:
    """Superpixel segmentation of a grayscale image.

    The patch count of the result may differ from ``m`` (cluster collapse,
    connectivity enforcement); use :func:`rebalance_patches` when an exact
    count is required.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("slic_superpixels expects a 2-D grayscale image")
    h, w = img.shape
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > h * w:
        raise ValueError(f"m={m} exceeds pixel count {h * w}")

    spacing = int(max(1, round(np.sqrt(h * w / m))))
    seed_ys = np.arange(spacing // 2, h, spacing)
    seed_xs = np.arange(spacing // 2, w, spacing)

    # Nudge each seed to the lowest-gradient pixel of its 3x3 neighborhood so
    # centers avoid edges; stay put on ties.
    gy, gx = np.gradient(img)
    grad = gy * gy + gx * gx
    centers = []
    for sy in seed_ys:
        for sx in seed_xs:
            y0, y1 = max(sy - 1, 0), min(sy + 2, h)
            x0, x1 = max(sx - 1, 0), min(sx + 2, w)
            win = grad[y0:y1, x0:x1]
            if win.min() < grad[sy, sx]:
                dy, dx = np.unravel_index(np.argmin(win), win.shape)
                sy, sx = y0 + dy, x0 + dx
            centers.append((float(sy), float(sx), img[sy, sx]))
    centers = np.array(centers)

    ys, xs = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.intp)
    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        for idx, (cy, cx, ci) in enumerate(centers):
            y0, y1 = max(int(cy) - 2 * spacing, 0), min(int(cy) + 2 * spacing + 1, h)
            x0, x1 = max(int(cx) - 2 * spacing, 0), min(int(cx) + 2 * spacing + 1, w)
            d_int = img[y0:y1, x0:x1] - ci
            d_sp = ((ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2)
            dist = d_int * d_int + (compactness / spacing) ** 2 * d_sp
            closer = dist < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][closer] = dist[closer]
            labels[y0:y1, x0:x1][closer] = idx
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        sum_y = np.bincount(labels.ravel(), weights=ys.ravel(), minlength=len(centers))
        sum_x = np.bincount(labels.ravel(), weights=xs.ravel(), minlength=len(centers))
        sum_i = np.bincount(labels.ravel(), weights=img.ravel(), minlength=len(centers))
        occupied = counts > 0
        centers[occupied, 0] = sum_y[occupied] / counts[occupied]
        centers[occupied, 1] = sum_x[occupied] / counts[occupied]
        centers[occupied, 2] = sum_i[occupied] / counts[occupied]

    labels = _enforce_connectivity(labels)
    return _canonical_patch_set(labels)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest connected component per label; absorb fragments into
    the adjacent label with the longest shared boundary."""
    out = labels.copy()
    for value in np.unique(labels):
        mask = out == value
        comps, ncomp = ndimage.label(mask)
        if ncomp <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comps), comps, index=range(1, ncomp + 1))
        keep = 1 + int(np.argmax(sizes))
        for comp in range(1, ncomp + 1):
            if comp == keep:
                continue
            out[comps == comp] = -1
            _absorb_region(out, comps == comp)
    return out


def _absorb_region(labels: np.ndarray, region: np.ndarray) -> None:
    """Relabel ``region`` to its most-adjacent neighboring label (in place)."""
    boundary = ndimage.binary_dilation(region) & ~region
    neighbor_labels = labels[boundary]
    neighbor_labels = neighbor_labels[neighbor_labels >= 0]
    if neighbor_labels.size == 0:
        # Region touches nothing labelled yet (possible when several
        # fragments are absorbed in sequence); fall back to nearest label.
        filled = labels.copy()
        filled[region] = -1
        _, (iy, ix) = ndimage.distance_transform_edt(filled < 0, return_indices=True)
        labels[region] = labels[iy[region], ix[region]]
        return
    counts = np.bincount(neighbor_labels)
    labels[region] = int(np.argmax(counts))


def _canonical_patch_set(labels: np.ndarray) -> PatchSet:
    """Relabel contiguously, ordered by patch centroid (row, then column)."""
    values = np.unique(labels)
    h, w = labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    centroids = []
    for value in values:
        mask = labels == value
        centroids.append((ys[mask].mean(), xs[mask].mean(), value))
    order = sorted(range(len(values)), key=lambda i: (centroids[i][0], centroids[i][1]))
    remap = np.zeros(int(values.max()) + 1, dtype=np.intp)
    for new, i in enumerate(order):
        remap[int(centroids[i][2])] = new
    return PatchSet(label_map=remap[labels], m=len(values))


def rebalance_patches(patches: PatchSet, m: int) -> PatchSet:
    """Force an exact patch count: merge the smallest patch into its
    most-adjacent neighbor while over target, split the largest patch along
    its longer axis while under."""
    labels = patches.label_map.copy()
    while len(np.unique(labels)) > m:
        values, counts = np.unique(labels, return_counts=True)
        smallest = values[int(np.argmin(counts))]
        region = labels == smallest
        labels[region] = -1
        _absorb_region(labels, region)
    while len(np.unique(labels)) < m:
        values, counts = np.unique(labels, return_counts=True)
        order = np.argsort(counts)[::-1]
        for idx in order:
            if _split_patch(labels, int(values[idx]), int(labels.max()) + 1):
                break
        else:
            raise ValueError(f"cannot split any patch further to reach m={m}")
    return _canonical_patch_set(labels)


def _split_patch(labels: np.ndarray, value: int, new_value: int) -> bool:
    mask = labels == value
    ys, xs = np.nonzero(mask)
    if ys.size < 2:
        return False
    span_y = ys.max() - ys.min()
    span_x = xs.max() - xs.min()
    coords = ys if span_y >= span_x else xs
    cut = np.median(coords)
    half = coords > cut
    if not half.any() or half.all():
        half = coords >= cut
        if not half.any() or half.all():
            return False
    labels[ys[half], xs[half]] = new_value
    return True


# -- hashing -----------------------------------------------------------------


def patch_hash(image: np.ndarray, patch_mask: np.ndarray) -> np.uint64:
    """Average hash of one patch: crop its bounding box, fill non-patch
    pixels with the patch mean, downsample to 8x8, threshold each cell
    against the median of the 64 cells (strictly greater -> bit 1).
    Bits are packed row-major, first cell in the most significant bit."""
    if not patch_mask.any():
        raise ValueError("empty patch")
    img = np.asarray(image, dtype=np.float64)
    ys, xs = np.nonzero(patch_mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    crop = img[y0:y1, x0:x1]
    mask = patch_mask[y0:y1, x0:x1]
    filled = np.where(mask, crop, crop[mask].mean())
    cells = resize_bilinear(filled, 8, 8).ravel()
    bits = cells > np.median(cells)
    code = np.uint64(0)
    for i, bit in enumerate(bits):
        if bit:
            code |= np.uint64(1) << np.uint64(HASH_BITS - 1 - i)
    return code


def hash_patches(image: np.ndarray, patches: PatchSet) -> PatchHashes:
    codes = np.empty(patches.m, dtype=np.uint64)
    for p in range(patches.m):
        codes[p] = patch_hash(image, patches.label_map == p)
    return PatchHashes(codes=codes)


def hamming(h1, h2) -> int:
    """Number of differing bits between two 64-bit codes."""
    return int(np.uint64(h1) ^ np.uint64(h2)).bit_count()


def patch_graph(hashes_i: PatchHashes, hashes_j: PatchHashes) -> PatchGraph:
    """All pairwise Hamming distances between two images' patch codes."""
    if hashes_i.codes.shape != hashes_j.codes.shape:
        raise ValueError(f"patch count mismatch: {hashes_i.codes.shape} vs "
                         f"{hashes_j.codes.shape}")
    xor = np.bitwise_xor.outer(hashes_i.codes, hashes_j.codes)
    as_bytes = np.ascontiguousarray(xor)[..., None].view(np.uint8)
    return PatchGraph(values=_POPCOUNT[as_bytes].sum(axis=-1).astype(np.float64))


# -- learned aggregation and loss ---------------------------------------------


def aggregate_patch_graph(graph: PatchGraph, aggregator: Linear) -> Tensor:
    """Scalar pair weight: FC layer over the flattened, 1/64-scaled Hamming
    matrix."""
    flat = graph.values.reshape(1, -1) / HASH_BITS
    if flat.shape[1] != aggregator.w.shape[0]:
        raise ValueError(f"aggregator expects {aggregator.w.shape[0]} inputs, "
                         f"graph flattens to {flat.shape[1]}")
    return aggregator(ad.tensor(flat.astype(aggregator.w.dtype))).reshape(())


def pairwise_weight_matrix(hash_sets: list[PatchHashes], aggregator: Linear) -> Tensor:
    """Raw [n, n] weights: one aggregated scalar per ordered image pair."""
    n = len(hash_sets)
    rows = [patch_graph(hash_sets[u], hash_sets[v]).values.ravel() / HASH_BITS
            for u in range(n) for v in range(n)]
    stacked = np.stack(rows).astype(aggregator.w.dtype)
    return aggregator(ad.tensor(stacked)).reshape((n, n))


def intra_image_loss(raw_weights: Tensor, features: list[Tensor]) -> Tensor:
    """Same weighted-distance form as the inter-image loss, driven by the
    structure-derived weights."""
    return graph_weighted_distance(raw_weights, features)
