"""Mini-batch SGD over group pairs with a step-decay learning-rate schedule."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import backward
from .dataset import to_network_input
from .errors import ConfigurationError, DiagnosticError, UsageError
from .losses import LossConfig, discrimination_loss
from .network import GroupPairBatch, ModelWeights, forward_pair

log = logging.getLogger(__name__)

ABLATION_MODES = ("only_batch", "batch_plus_selection", "all")

# ablation mode -> (selection mode, alpha, beta)
ABLATION_PRESETS = {
    "only_batch": ("random", 1.0, 0.0),
    "batch_plus_selection": ("clustering", 1.0, 0.0),
    "all": ("clustering", 0.99, 0.01),
}


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.5
    lr_decay_every_epochs: int = 3
    epochs: int = 9
    batch_size: int = 12
    loss: LossConfig = field(default_factory=LossConfig)
    ablation_mode: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr < 0:
            raise ConfigurationError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every_epochs < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("decay period and batch size must be >= 1, epochs >= 0")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")

    @classmethod
    def for_ablation(cls, mode: str, **kw) -> "TrainConfig":
        _, alpha, beta = ABLATION_PRESETS[mode]
        loss = kw.pop("loss", LossConfig())
        return cls(ablation_mode=mode, loss=replace(loss, alpha=alpha, beta=beta), **kw)


@dataclass
class TrainLog:
    iteration: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def append(self, epoch: int, lr: float, loss: float) -> None:
        self.iteration.append(len(self.iteration))
        self.epoch.append(epoch)
        self.lr.append(lr)
        self.loss.append(loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "epoch", "lr", "loss"])
        for row in zip(self.iteration, self.epoch, self.lr, self.loss):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def moving_average(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.loss, dtype=np.float64)
        if len(x) < window:
            window = max(1, len(x))
        return np.convolve(x, np.ones(window) / window, mode="valid")


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * config.lr_decay_factor ** (epoch // config.lr_decay_every_epochs)


class ViewStore:
    """Network-ready float views of every corpus object, keyed by object id."""

    def __init__(self, objects, input_size: tuple, dtype="float32"):
        self._views = {}
        self._ids = {}
        for obj in objects:
            self._views[obj.object_id] = to_network_input(obj.views, input_size, dtype)
            self._ids[obj.object_id] = {v: i for i, v in enumerate(obj.view_ids)}

    def group(self, object_id: str, view_ids) -> np.ndarray:
        try:
            stack = self._views[object_id]
            index = self._ids[object_id]
        except KeyError:
            raise UsageError(f"object {object_id!r} is not in the corpus") from None
        try:
            return stack[[index[v] for v in view_ids]]
        except KeyError as exc:
            raise UsageError(f"{object_id} has no view {exc.args[0]}") from None


def assemble_batch(records, store: ViewStore) -> GroupPairBatch:
    """Stack group views contiguously per chain, B groups of V views each."""
    if not records:
        raise UsageError("cannot assemble an empty batch")
    views_a = np.concatenate([store.group(r.object_a, r.views_a) for r in records])
    views_b = np.concatenate([store.group(r.object_b, r.views_b) for r in records])
    return GroupPairBatch(
        views_a,
        views_b,
        np.array([r.class_a for r in records]),
        np.array([r.class_b for r in records]),
        np.array([r.label for r in records]),
    )


def train_step(weights: ModelWeights, batch: GroupPairBatch, loss_cfg: LossConfig, lr: float) -> float:
    weights.zero_grad()
    emb_a, emb_b = forward_pair(weights, batch)
    loss = discrimination_loss(
        emb_a, emb_b, batch.labels_a, batch.labels_b, batch.pair_labels, loss_cfg, weights.centers
    )
    value = float(loss.data)
    if not np.isfinite(value):
        raise DiagnosticError(f"non-finite loss {value} at lr={lr}")
    backward(loss)
    for p in weights.parameters():
        if p.grad is not None:
            p.data -= p.data.dtype.type(lr) * p.grad
    return value


def train(objects, pairs, weights: ModelWeights, config: TrainConfig, store: ViewStore | None = None):
    """Plain SGD on the weighted loss; mutates and returns ``weights`` with its log."""
    if not pairs:
        raise UsageError("training needs a non-empty pair list")
    cfg = weights.config
    if config.loss.num_classes != cfg.num_classes:
        raise ConfigurationError(
            f"loss expects {config.loss.num_classes} classes, network center bank has {cfg.num_classes}"
        )
    if store is None:
        store = ViewStore(objects, cfg.input_size[:2], cfg.dtype)
    trainlog = TrainLog()
    bsz = config.batch_size
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(pairs))
        start = time.perf_counter()
        for first in range(0, len(order), bsz):
            batch = assemble_batch([pairs[i] for i in order[first:first + bsz]], store)
            try:
                value = train_step(weights, batch, config.loss, lr)
            except DiagnosticError as exc:
                raise DiagnosticError(f"iteration {len(trainlog.loss)}, lr {lr}: {exc}") from exc
            trainlog.append(epoch, lr, value)
        trainlog.epoch_seconds.append(time.perf_counter() - start)
        n_batches = -(-len(order) // bsz)
        log.info("epoch %d lr %.4g mean loss %.5f", epoch, lr, np.mean(trainlog.loss[-n_batches:]))
    return weights, trainlog
