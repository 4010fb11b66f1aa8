"""The full localization model: backbone + head plus the three relational
components (cross-sample relation graph, structural patch aggregator, and
cross-image attention parameters), all registered under one parameter tree
so the optimizer and checkpoint see a single flat namespace.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import (BackboneConfig, ProbabilityHead, build_backbone,
                       extract_features, predict_class_map)
from .losses import base_loss
from .nn import Linear, Module
from .reasoning import knowledge_reasoning_loss
from .relation import RelationGraph, inter_image_loss
from .structure import (PatchHashes, PatchSet, hash_patches, intra_image_loss,
                        pairwise_weight_matrix, rebalance_patches,
                        slic_superpixels)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    image_size: int = 64
    num_classes: int = 2
    backbone: str = "tiny"
    tiny_channels: tuple = (32, 64, 128, 128)
    tiny_kernels: tuple = (3, 3, 3, 3)
    head_hidden: int = 64
    batch_size: int = 2
    patch_count: int = 16        # SLIC patches per image
    kr_patch_count: int = 4      # feature blocks for the reasoning graph
    slic_compactness: float = 0.2
    slic_iterations: int = 10
    dtype: str = "float32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiny_channels"] = list(self.tiny_channels)
        d["tiny_kernels"] = list(self.tiny_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["tiny_channels"] = tuple(d.get("tiny_channels", (32, 64, 128, 128)))
        d["tiny_kernels"] = tuple(d.get("tiny_kernels", (3, 3, 3, 3)))
        return cls(**d)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(arch=self.backbone, image_size=self.image_size,
                              tiny_channels=self.tiny_channels,
                              tiny_kernels=self.tiny_kernels,
                              head_hidden=self.head_hidden,
                              num_classes=self.num_classes,
                              dtype=self.np_dtype)

    def structure_key(self) -> str:
        """Cache key component for the SLIC/hash configuration."""
        raw = f"{self.image_size}|{self.patch_count}|{self.slic_compactness}|{self.slic_iterations}"
        return hashlib.sha1(raw.encode()).hexdigest()[:12]


class ChexGraphModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.backbone_cfg = cfg.backbone_config()
        dtype = cfg.np_dtype
        self.backbone = self.register_module("backbone", build_backbone(self.backbone_cfg, rng))
        self.head = self.register_module("head", ProbabilityHead(self.backbone_cfg, rng))
        n = cfg.batch_size
        self.relation_graph = RelationGraph(weights=self.register_parameter(
            "relation_graph", ad.parameter(np.full((n, n), 1.0 / n), dtype=dtype)))
        self.patch_aggregator = self.register_module(
            "patch_aggregator", Linear(cfg.patch_count ** 2, 1, init="zeros", dtype=dtype))
        self.affinity_weight = self.register_parameter(
            "affinity_weight",
            ad.parameter(np.eye(self.backbone_cfg.feature_channels), dtype=dtype))
        self.enhanced_aggregator = self.register_module(
            "enhanced_aggregator", Linear(cfg.kr_patch_count ** 2, 1, init="zeros", dtype=dtype))

    # -- forward pieces -----------------------------------------------------

    def forward_probabilities(self, pixels):
        fm = extract_features(pixels, self.backbone, self.backbone_cfg)
        return fm, predict_class_map(fm, self.head)

    def image_patch_hashes(self, pixels: np.ndarray, cache_dir=None,
                           image_id: str | None = None):
        """SLIC + rebalance + average hash over one image's mean channel.

        With ``cache_dir`` and ``image_id`` given, results are stored per
        image keyed by the structure-config hash, so reruns skip the SLIC
        pass.
        """
        cache_file = None
        if cache_dir is not None and image_id is not None:
            safe = image_id.replace("/", "_")
            cache_file = Path(cache_dir) / f"{safe}.{self.structure_cache_key}.npz"
            if cache_file.is_file():
                data = np.load(cache_file)
                patches = PatchSet(label_map=data["label_map"],
                                   m=int(data["label_map"].max()) + 1)
                return patches, PatchHashes(codes=data["codes"])
        gray = np.asarray(pixels, dtype=np.float64).mean(axis=0)
        patches = slic_superpixels(gray, self.cfg.patch_count,
                                   compactness=self.cfg.slic_compactness,
                                   iterations=self.cfg.slic_iterations)
        patches = rebalance_patches(patches, self.cfg.patch_count)
        hashes = hash_patches(gray, patches)
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache_file, label_map=patches.label_map, codes=hashes.codes)
        return patches, hashes

    @property
    def structure_cache_key(self) -> str:
        return self.cfg.structure_key()

    def compute_losses(self, pixels, grid_labels, image_labels, lam, hash_sets,
                       enabled, grid_weight: float = 4.0):
        """All enabled loss components for one batch.

        Returns (losses dict keyed base/ir/ik/kr, ClassProbMap).
        """
        n = pixels.shape[0]
        if n != self.cfg.batch_size:
            raise ValueError(f"batch size {n} != configured {self.cfg.batch_size}")
        fm, prob_map = self.forward_probabilities(pixels)
        losses = {"base": base_loss(prob_map.probs, grid_labels, image_labels,
                                    lam, grid_weight)}
        feats = [fm.values[i] for i in range(n)]
        if "ir" in enabled:
            losses["ir"] = inter_image_loss(self.relation_graph, feats)
        if "ik" in enabled:
            raw = pairwise_weight_matrix(list(hash_sets), self.patch_aggregator)
            losses["ik"] = intra_image_loss(raw, feats)
        if "kr" in enabled:
            c, h, w = fm.values.shape[1:]
            flat = [fm.values[i].reshape((c, h * w)) for i in range(n)]
            losses["kr"] = knowledge_reasoning_loss(
                flat, self.affinity_weight, self.enhanced_aggregator,
                self.cfg.kr_patch_count, (h, w))
        return losses, prob_map
