"""The three relational components on a real image pair: the learnable
relation graph, the SLIC/hash structural graph, and cross-image attention.

Run from the repository root:  python demos/03_structural_graphs.py
"""

import numpy as np

from chexgraph import autodiff as ad
from chexgraph import (generate_synthetic_dataset, init_relation_graph,
                       inter_image_loss, patch_graph)
from chexgraph.model import ChexGraphModel, ModelConfig
from chexgraph.reasoning import affinity, attend
from chexgraph.relation import feature_distance
from chexgraph.structure import intra_image_loss, pairwise_weight_matrix

dataset = generate_synthetic_dataset(seed=11, n_images=4, fraction_annotated=1.0)
model = ChexGraphModel(ModelConfig(), np.random.default_rng(1))
a, b = dataset.samples[0], dataset.samples[1]

# Superpixel patches and their perceptual hash codes.
patches_a, hashes_a = model.image_patch_hashes(a.pixels)
patches_b, hashes_b = model.image_patch_hashes(b.pixels)
print(f"{patches_a.m} patches per image; first codes: "
      f"{hashes_a.codes[:3]}")

# The patch graph holds all pairwise Hamming distances between the two
# images' codes; structurally similar patch pairs score low.
g_l = patch_graph(hashes_a, hashes_b)
print(f"patch graph shape {g_l.values.shape}, "
      f"distance range [{g_l.values.min():.0f}, {g_l.values.max():.0f}] bits")

# Backbone features drive all three losses.
pixels = np.stack([a.pixels, b.pixels]).astype(np.float32)
fm, _ = model.forward_probabilities(pixels)
feats = [fm.values[0], fm.values[1]]
print(f"\nfeature distance between the pair: {feature_distance(*feats).item():.3f}")

# Relation graph: raw weights start uniform at 1/n and are row-softmaxed at
# use time, so the loss is a weighted mean of pairwise distances.
graph = init_relation_graph(2)
print(f"relation graph init:\n{graph.weights.data}")
print(f"relation loss: {inter_image_loss(graph, feats).item():.4f}")

# Structural weights come from the hash graphs through a learned FC layer.
raw = pairwise_weight_matrix([hashes_a, hashes_b], model.patch_aggregator)
print(f"structural loss: {intra_image_loss(raw, feats).item():.4f}")

# Cross-image attention: the affinity matrix compares every position pair;
# column-softmaxing it yields convex mixing weights.
c, h, w = fm.values.shape[1:]
fa = fm.values[0].reshape((c, h * w))
fb = fm.values[1].reshape((c, h * w))
aff = affinity(fa, fb, model.affinity_weight)
fa_att, fb_att = attend(fa, fb, aff)
cols = ad.softmax(aff, axis=0).data
print(f"\naffinity shape {aff.shape}; attention columns sum to "
      f"{cols.sum(axis=0).min():.6f}..{cols.sum(axis=0).max():.6f}")
print(f"enhanced-pair distance: {feature_distance(fa_att, fb_att).item():.3f}")
