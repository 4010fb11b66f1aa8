"""Training engine: weighted total loss, ablation switches, Nesterov SGD
with the step schedule, JSON-lines step logging, and checkpointing.

The learning rate follows lr0 * decay^(-floor(epoch / every)); with the
defaults that is 1e-3 for epochs 0-3, 1e-4 for 4-7, 1e-5 for epoch 8.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, make_grid_labels
from .losses import LossReport
from .model import ChexGraphModel, ModelConfig

COMPONENTS = ("base", "ir", "ik", "kr")
ABLATION_MODES = {
    "baseline": ("base",),
    "IR": ("base", "ir"),
    "IK": ("base", "ik"),
    "KR": ("base", "kr"),
    "IR+IK": ("base", "ir", "ik"),
    "IR+IK+KR": ("base", "ir", "ik", "kr"),
}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 9
    lr0: float = 1e-3
    lr_decay_every: int = 4
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 2
    loss_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    grid_loss_weight: float = 4.0
    ablation: str = "IR+IK+KR"
    seed: int = 0
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}; "
                             f"choose from {sorted(ABLATION_MODES)}")
        for name in ("epochs", "lr0", "momentum", "batch_size", "grid_loss_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_weights"] = tuple(d.get("loss_weights", (0.25,) * 4))
        return cls(**d)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def effective_weights(cfg: TrainConfig) -> dict[str, float]:
    """Per-component weights with disabled components' mass redistributed
    equally among the enabled ones."""
    enabled = ABLATION_MODES[cfg.ablation]
    base = dict(zip(COMPONENTS, cfg.loss_weights))
    missing = sum(base[c] for c in COMPONENTS if c not in enabled)
    share = missing / len(enabled)
    return {c: (base[c] + share if c in enabled else 0.0) for c in COMPONENTS}


def total_loss(components: dict, cfg: TrainConfig):
    """Weighted combination of the enabled loss components.

    Raises :class:`NonFiniteLossError` if any component is non-finite.
    Returns (total tensor, LossReport of floats, weights dict).
    """
    weights = effective_weights(cfg)
    values = {}
    for name in COMPONENTS:
        if name in components:
            v = float(components[name].data)
            if not np.isfinite(v):
                raise NonFiniteLossError(f"loss component {name!r} is {v}")
            values[name] = v
        else:
            values[name] = 0.0
    out = None
    for name in COMPONENTS:
        if name in components and weights[name] > 0.0:
            term = components[name] * weights[name]
            out = term if out is None else out + term
    report = LossReport(l_base=values["base"], l_ir=values["ir"], l_ik=values["ik"],
                        l_kr=values["kr"],
                        l_all=sum(weights[c] * values[c] for c in COMPONENTS))
    return out, report, weights


class NesterovSGD:
    """SGD with Nesterov momentum.

    Per parameter, with g the gradient (plus weight decay where flagged):

        v   <- momentum * v + g
        p   <- p - lr * (g + momentum * v)     (Nesterov)
        p   <- p - lr * v                      (plain momentum)
    """

    def __init__(self, named_params, momentum: float, weight_decay: float,
                 nesterov: bool = True):
        self.params = [(name, t, decay) for name, t, decay in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.params}

    def clip_gradients(self, max_norm: float) -> float:
        total = 0.0
        for _, t, _ in self.params:
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for _, t, _ in self.params:
                if t.grad is not None:
                    t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
        return norm

    def step(self, lr: float) -> None:
        for name, t, decay in self.params:
            if t.grad is None:
                continue
            g = t.grad
            if decay and self.weight_decay:
                g = g + np.asarray(self.weight_decay, dtype=t.data.dtype) * t.data
            v = self.velocity[name]
            v *= np.asarray(self.momentum, dtype=v.dtype)
            v += g
            update = g + self.momentum * v if self.nesterov else v
            t.data = t.data - np.asarray(lr, dtype=t.data.dtype) * update

    def zero_grad(self) -> None:
        for _, t, _ in self.params:
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.{name}": v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            key = f"opt.{name}"
            if key in arrays:
                self.velocity[name] = arrays[key].astype(
                    self.velocity[name].dtype, copy=True)


@dataclass
class TrainResult:
    out_dir: Path
    log_path: Path
    checkpoint_paths: list = field(default_factory=list)
    final_checkpoint: Path | None = None
    epoch_mean_loss: list = field(default_factory=list)


def prepare_arrays(dataset: Dataset, grid: int):
    """Stack dataset tensors once: pixels, grid labels, image labels, flags."""
    n = len(dataset)
    c = dataset.num_classes
    size = dataset.image_size
    pixels = np.zeros((n, 3, size, size), dtype=np.float32)
    grid_labels = np.zeros((n, c, grid, grid), dtype=np.uint8)
    image_labels = np.zeros((n, c), dtype=np.uint8)
    lam = np.zeros((n, c), dtype=np.uint8)
    for i, s in enumerate(dataset.samples):
        pixels[i] = s.pixels
        image_labels[i] = s.image_labels
        lam[i] = s.has_box_annotation
        full = make_grid_labels(s, (grid, grid)).labels
        # Supervise the grid only where the annotation flag allows it.
        grid_labels[i] = full * s.has_box_annotation[:, None, None]
    return pixels, grid_labels, image_labels, lam


def train(dataset: Dataset, cfg: TrainConfig, out_dir,
          model_cfg: ModelConfig | None = None,
          resume_from=None, cache_dir=None) -> TrainResult:
    """Run the full schedule over ``dataset``; deterministic given the seed.

    Writes ``train_log.jsonl`` plus one checkpoint per epoch and a final
    checkpoint into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} samples, need at least "
                         f"one batch of {cfg.batch_size}")
    if model_cfg is None:
        model_cfg = ModelConfig(image_size=dataset.image_size,
                                num_classes=dataset.num_classes,
                                batch_size=cfg.batch_size)
    if model_cfg.batch_size != cfg.batch_size:
        raise ValueError("model and training batch sizes differ")

    rng = np.random.default_rng(cfg.seed)
    model = ChexGraphModel(model_cfg, rng)
    optimizer = NesterovSGD(model.named_parameters(), momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay, nesterov=cfg.nesterov)
    start_epoch = 0
    if resume_from is not None:
        arrays, header = load_checkpoint(resume_from)
        model.load_state_arrays(arrays)
        optimizer.load_state_arrays(arrays)
        rng.bit_generator.state = header["rng_state"]
        start_epoch = header["epoch"] + 1

    grid = model.backbone_cfg.grid_size
    pixels, grid_labels, image_labels, lam = prepare_arrays(dataset, grid)
    hash_sets = [model.image_patch_hashes(s.pixels, cache_dir=cache_dir,
                                          image_id=s.id)[1]
                 for s in dataset.samples]
    enabled = ABLATION_MODES[cfg.ablation]

    result = TrainResult(out_dir=out_dir, log_path=out_dir / "train_log.jsonl")
    config_blob = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    step = start_epoch * (len(dataset) // cfg.batch_size)
    mode = "a" if resume_from is not None else "w"
    with open(result.log_path, mode, encoding="utf-8") as logf:
        for epoch in range(start_epoch, cfg.epochs):
            lr = learning_rate(epoch, cfg)
            perm = rng.permutation(len(dataset))
            n_batches = len(perm) // cfg.batch_size
            epoch_losses = []
            for b in range(n_batches):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch_hashes = [hash_sets[i] for i in idx]
                components, _ = model.compute_losses(
                    pixels[idx], grid_labels[idx], image_labels[idx], lam[idx],
                    batch_hashes, enabled, grid_weight=cfg.grid_loss_weight)
                loss, report, weights = total_loss(components, cfg)
                optimizer.zero_grad()
                loss.backward()
                optimizer.clip_gradients(cfg.grad_clip)
                optimizer.step(lr)
                record = {"step": step, "epoch": epoch, "lr": lr,
                          "beta_b": cfg.grid_loss_weight}
                record.update({f"w_{c}": weights[c] for c in COMPONENTS})
                record.update(report.as_dict())
                logf.write(json.dumps(record, sort_keys=True) + "\n")
                epoch_losses.append(report.l_all)
                step += 1
            result.epoch_mean_loss.append(float(np.mean(epoch_losses)))
            arrays = dict(model.state_arrays())
            arrays.update(optimizer.state_arrays())
            ckpt = out_dir / f"checkpoint_epoch_{epoch}.ckpt"
            save_checkpoint(ckpt, arrays, config_blob, epoch,
                            rng_state=rng.bit_generator.state)
            result.checkpoint_paths.append(ckpt)

    final = out_dir / "final.ckpt"
    arrays = dict(model.state_arrays())
    arrays.update(optimizer.state_arrays())
    save_checkpoint(final, arrays, config_blob, cfg.epochs - 1,
                    rng_state=rng.bit_generator.state)
    result.final_checkpoint = final
    return result


def load_model(checkpoint_path) -> tuple[ChexGraphModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, header)."""
    arrays, header = load_checkpoint(checkpoint_path)
    model_cfg = ModelConfig.from_dict(header["config"]["model"])
    model = ChexGraphModel(model_cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    model.eval()
    return model, header
