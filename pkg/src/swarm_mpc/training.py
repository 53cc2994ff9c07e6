"""Imitation training: MSE on first-step controls with Adam, LR-on-plateau and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .model import GraphInstance, ModelConfig, ModelParams, build_graph, forward_batch, init_params
from .scenario import LabeledSample


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    weight_decay: float = 1e-6
    plateau_patience: int = 15      # epochs without val improvement before lr drops
    lr_factor: float = 0.2
    early_stop_patience: int = 50   # epochs without val improvement before stopping
    max_epochs: int = 500
    batch_size: int = 64            # whole graphs per batch
    seed: int = 0
    improvement_threshold: float = 1e-6  # absolute val-loss gain that counts
    grad_clip_norm: float = 10.0    # global-norm clip; the raw-ratio attention
                                    # weights can spike when score sums cancel
    attention_lr_scale: float = 0.02  # lr multiplier for key/query/value heads;
                                      # at full rate their drift outruns what the
                                      # shared trunk can track and training stalls

    def __post_init__(self) -> None:
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0.0:
            raise ValueError("grad_clip_norm must be > 0 (or None)")
        if not 0.0 < self.attention_lr_scale <= 1.0:
            raise ValueError("attention_lr_scale must be in (0, 1]")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    @property
    def epochs_run(self) -> int:
        return len(self.val_losses)


def mse_loss(predicted: Tensor, labels: np.ndarray) -> Tensor:
    """Mean squared error over every node and both control dimensions."""
    target = np.asarray(labels, dtype=np.float64)
    if predicted.shape != target.shape:
        raise TrainingError(f"prediction shape {predicted.shape} vs labels {target.shape}")
    diff = predicted - Tensor(target)
    return ad.tmean(ad.square(diff))


def sample_to_graph(sample: LabeledSample) -> tuple[GraphInstance, np.ndarray]:
    """Graph plus per-node label rows; obstacle nodes get zero labels so the
    network learns to hold parked entities still."""
    graph = build_graph(sample.states, sample.targets, sample.obstacles)
    labels = np.zeros((graph.n_nodes, 2))
    for i, u in enumerate(sample.labels):
        labels[i] = (u.pedal, u.steer)
    return graph, labels


def _epoch_loss(
    graphs: Sequence[GraphInstance],
    labels: Sequence[np.ndarray],
    params: ModelParams,
    batch_size: int,
) -> float:
    """Dataset MSE without touching the tape (used for validation)."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for lo in range(0, len(graphs), batch_size):
            batch = list(range(lo, min(lo + batch_size, len(graphs))))
            out = forward_batch([graphs[i] for i in batch], params)
            target = np.concatenate([labels[i] for i in batch], axis=0)
            diff = out.controls.data - target
            total += float(np.sum(diff * diff))
            count += target.size
    return total / count


def train(
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    model_config: ModelConfig = ModelConfig(),
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, TrainReport]:
    """Run the full schedule and return the weights of the best validation epoch.

    Deterministic for a fixed seed: initialisation, shuffling and every update
    use seeded generators and position-stable kernels.
    """
    if not train_samples or not val_samples:
        raise TrainingError("train and validation sets must both be non-empty")

    train_graphs, train_labels = zip(*(sample_to_graph(s) for s in train_samples))
    val_graphs, val_labels = zip(*(sample_to_graph(s) for s in val_samples))

    params = init_params(model_config, seed=config.seed)
    tensors = params.parameter_list()
    lr_scales = [
        config.attention_lr_scale if ("key" in name or "query" in name or "value" in name) else 1.0
        for name in params.tensors
    ]
    adam = AdamState.for_params(
        tensors, lr=config.lr0, weight_decay=config.weight_decay, lr_scales=lr_scales
    )
    shuffle_rng = np.random.default_rng([config.seed, 1])

    report = TrainReport()
    best = params.snapshot()
    best_val = float("inf")
    best_epoch = -1
    since_improvement = 0
    since_lr_drop = 0

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_graphs))
        running = 0.0
        seen = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            out = forward_batch([train_graphs[i] for i in batch], params)
            target = np.concatenate([train_labels[i] for i in batch], axis=0)
            loss = mse_loss(out.controls, target)
            grads = ad.backward(loss, tensors)
            if config.grad_clip_norm is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > config.grad_clip_norm:
                    clip = config.grad_clip_norm / norm
                    grads = [g * clip for g in grads]
            ad.adam_step(adam, tensors, grads)
            running += loss.item() * target.size
            seen += target.size

        val_loss = _epoch_loss(val_graphs, val_labels, params, config.batch_size)
        report.train_losses.append(running / seen)
        report.val_losses.append(val_loss)
        report.lr_history.append(adam.lr)

        if val_loss < best_val - config.improvement_threshold:
            best_val = val_loss
            best_epoch = epoch
            best = params.snapshot()
            since_improvement = 0
            since_lr_drop = 0
        else:
            since_improvement += 1
            since_lr_drop += 1

        if since_improvement >= config.early_stop_patience:
            report.stop_reason = "early_stop"
            break
        if since_lr_drop >= config.plateau_patience:
            adam.lr *= config.lr_factor
            since_lr_drop = 0
    else:
        report.stop_reason = "max_epochs"

    report.best_epoch = best_epoch
    report.best_val_loss = best_val
    params.restore(best)
    return params, report


def write_report_csv(report: TrainReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for i, (tr, va, lr) in enumerate(
            zip(report.train_losses, report.val_losses, report.lr_history)
        ):
            fh.write(f"{i},{tr!r},{va!r},{lr!r}\n")
