"""End-to-end run: split, select, pair, train, evaluate."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from . import dataset, network, pairgen, selection, trainer
from .evaluation import MetricReport, repeat_protocol
from .losses import LossConfig
from .network import NetworkConfig
from .pairgen import PairQuota
from .selection import SelectionConfig
from .trainer import ABLATION_PRESETS, TrainConfig, TrainLog

log = logging.getLogger(__name__)

# desk-scale network used by the synthetic experiments
DESK_NETWORK = NetworkConfig(
    conv_channels=(8, 16, 32, 64, 64),
    input_size=(32, 32, 1),
    views_per_group=3,
    batch_size=12,
    fc1_width=128,
    embedding_dim=32,
    num_classes=8,
)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = DESK_NETWORK
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    quota: PairQuota = field(default_factory=PairQuota)
    train_fraction: float = 0.8
    eval_runs: int = 10
    seed: int = 0

    @classmethod
    def ablation(cls, mode: str, seed: int = 0, **kw) -> "ExperimentConfig":
        sel_mode, alpha, beta = ABLATION_PRESETS[mode]
        base = cls(**kw)
        return replace(
            base,
            seed=seed,
            train=replace(base.train, ablation_mode=mode, seed=seed, loss=replace(base.train.loss, alpha=alpha, beta=beta)),
            selection=replace(base.selection, mode=sel_mode),
            quota=replace(base.quota, seed=seed),
        )


@dataclass
class ExperimentResult:
    baseline: MetricReport
    trained: MetricReport
    log: TrainLog
    weights: network.ModelWeights
    groups: list
    pairs: list
    seconds: float


def make_groups(train_objects, cfg: SelectionConfig, seed: int, weights=None) -> list:
    extractor = selection.EmbeddingExtractor(weights) if cfg.extractor == "embedding" else selection.DownsampleExtractor()
    fm = selection.extract_features(train_objects, extractor)
    centers = selection.class_centers(fm)
    return selection.select_groups(fm, centers, cfg, seed=seed)


def run(objects, cfg: ExperimentConfig, evaluate_baseline: bool = True) -> ExperimentResult:
    start = time.perf_counter()
    train_objs, test_objs = dataset.split(objects, cfg.train_fraction)
    num_classes = len({o.label for o in objects})
    net_cfg = replace(cfg.network, num_classes=num_classes, batch_size=cfg.train.batch_size)
    weights = network.build(net_cfg, seed=cfg.seed)

    groups = make_groups(train_objs, cfg.selection, cfg.seed, weights)
    pairs = pairgen.generate_pairs(groups, cfg.quota)

    baseline = repeat_protocol(weights, test_objs, runs=cfg.eval_runs, seed=cfg.seed) if evaluate_baseline else None
    tcfg = replace(cfg.train, loss=replace(cfg.train.loss, num_classes=num_classes))
    weights, trainlog = trainer.train(train_objs, pairs, weights, tcfg)
    trained = repeat_protocol(weights, test_objs, runs=cfg.eval_runs, seed=cfg.seed)
    seconds = time.perf_counter() - start
    log.info("run seed=%d mode=%s map=%.4f (baseline %s) in %.0fs", cfg.seed, cfg.train.ablation_mode,
             trained.map, f"{baseline.map:.4f}" if baseline else "-", seconds)
    return ExperimentResult(baseline, trained, trainlog, weights, groups, pairs, seconds)


__all__ = ["DESK_NETWORK", "ExperimentConfig", "ExperimentResult", "LossConfig", "make_groups", "run"]
