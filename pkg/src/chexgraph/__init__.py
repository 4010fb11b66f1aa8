"""Weakly-supervised lesion localization for chest radiographs.

A grid-level detector (backbone + class-aware probability head) trained
with grid BCE / multiple-instance losses, regularized by three relational
terms: a learnable cross-sample relation graph, a structural patch graph
built from SLIC superpixels and perceptual hashes, and a cross-image
attention reasoning loss.
"""

from .autodiff import Tensor, parameter, tensor
from .backbone import (BackboneConfig, ClassProbMap, FeatureMap,
                       extract_features, predict_class_map, upsample_features)
from .data import (NIH_CLASSES, BoxAnnotation, Dataset, GridLabelMap,
                   ImageSample, load_dataset, make_grid_labels, preprocess,
                   project_box_to_grid)
from .evaluation import (LocalizationResult, accuracy_table, evaluate_model,
                         iou_discrete, threshold_grid)
from .losses import LossReport, base_loss, bce_grid_loss, mil_image_loss
from .model import ChexGraphModel, ModelConfig
from .reasoning import affinity, attend, enhanced_patch_graph, kr_loss
from .relation import RelationGraph, feature_distance, init_relation_graph, inter_image_loss
from .structure import (PatchGraph, PatchHashes, PatchSet, aggregate_patch_graph,
                        hamming, hash_patches, intra_image_loss, patch_graph,
                        patch_hash, rebalance_patches, slic_superpixels)
from .synthetic import dump_dataset, generate_synthetic_dataset, load_dumped_dataset
from .training import (ABLATION_MODES, NesterovSGD, TrainConfig, learning_rate,
                       load_model, total_loss, train)
from .visualize import export_heatmap

__version__ = "0.1.0"
