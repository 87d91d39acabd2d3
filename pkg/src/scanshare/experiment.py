"""Desk-scale sharing experiment.

Trains the free-viewing branch once, then the visual-search branch two
ways: on top of the frozen late-split decoder (two-stage) and with the
whole decoder trainable (end-to-end). Both are scored against held-out
oracle search scanpaths next to a uniform chance baseline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .accounting import SharingReport, split_sharing_report, trainable_count
from .data import split_dataset, synthesize
from .metrics import (MetricsReport, ModelPredictor, UniformPredictor, build_density_baselines, evaluate,
                      format_report)
from .model import ModelConfig, SplitConfig, build_model
from .training import (Checkpoint, TrainConfig, train_end_to_end_vs, train_stage1_fv,
                       train_stage2_vs_shared)


@dataclass
class ExperimentConfig:
    scenes: int = 200
    data_seed: int = 7
    grid: tuple[int, int] = (2, 2)
    categories: int = 4
    size: tuple[int, int] = (64, 64)
    feature_dim: int = 32
    fv_epochs: int = 15
    vs_epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 8
    model_seed: int = 0
    split_seed: int = 0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict[str, MetricsReport]  # "LS", "E2E", "uniform" on VS; "FV" on free viewing
    trainable: dict[str, int]  # trainable parameter counts per VS training variant
    sharing: SharingReport
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def relative_gap(self) -> float:
        """(E2E - LS) / E2E on the sequence score."""
        e2e = self.reports["E2E"].ss
        return (e2e - self.reports["LS"].ss) / e2e

    def summary(self) -> str:
        rows = [self.reports[k] for k in ("LS", "E2E", "uniform")]
        lines = [format_report(rows).rstrip(), f"relative SS gap LS vs E2E: {100 * self.relative_gap():.2f}%"]
        lines += [f"trainable {k}: {v}" for k, v in self.trainable.items()]
        lines += ["stage seconds: " + ", ".join(f"{k} {v:.0f}" for k, v in self.seconds.items())]
        return "\n".join(lines)


def run_sharing_experiment(cfg: ExperimentConfig | None = None,
                           progress: Callable[[str], None] | None = None) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    say = progress or (lambda msg: None)
    pairs = synthesize(cfg.data_seed, cfg.scenes, cfg.grid, cfg.categories, cfg.size)
    data = split_dataset(pairs, (0.8, 0.1, 0.1), cfg.split_seed)
    model_cfg = ModelConfig(feature_dim=cfg.feature_dim)
    late, early = SplitConfig(6), SplitConfig(5)

    def train_cfg(epochs):
        return TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=epochs,
                           seed=cfg.model_seed)

    def epoch_logger(stage):
        return lambda e, loss: say(f"{stage} epoch {e + 1} loss {loss:.4f}")

    seconds, ckpts = {}, {}
    t = time.perf_counter()
    fv_model = build_model(model_cfg, late, cfg.model_seed)
    ckpts["FV"] = train_stage1_fv(fv_model, data.train, train_cfg(cfg.fv_epochs), epoch_logger("fv"))
    seconds["fv"] = time.perf_counter() - t

    t = time.perf_counter()
    ls_model = build_model(model_cfg, late, cfg.model_seed)
    ckpts["LS"] = train_stage2_vs_shared(ls_model, ckpts["FV"], data.train, train_cfg(cfg.vs_epochs),
                                         epoch_logger("vs-shared"))
    seconds["vs_shared"] = time.perf_counter() - t

    t = time.perf_counter()
    e2e_model = build_model(model_cfg, late, cfg.model_seed)
    ckpts["E2E"] = train_end_to_end_vs(e2e_model, data.train, train_cfg(cfg.vs_epochs), ckpts["FV"],
                                       epoch_logger("vs-e2e"))
    seconds["vs_e2e"] = time.perf_counter() - t

    t = time.perf_counter()
    grid_shape = (cfg.size[1] // 4, cfg.size[0] // 4)
    baselines = build_density_baselines([sp for _, sp in data.train], grid_shape)
    reports = {
        "LS": evaluate(ModelPredictor(ls_model), data.test, "vs", baselines, "LS two-stage"),
        "E2E": evaluate(ModelPredictor(e2e_model), data.test, "vs", baselines, "end-to-end"),
        "uniform": evaluate(UniformPredictor(), data.test, "vs", baselines, "uniform"),
        "FV": evaluate(ModelPredictor(fv_model), data.test, "fv", baselines, "free-viewing"),
    }
    seconds["eval"] = time.perf_counter() - t

    trainable = {
        "LS": trainable_count(ls_model, "vs_shared"),
        "ES51": trainable_count(build_model(model_cfg, early, cfg.model_seed), "vs_shared"),
        "E2E": trainable_count(e2e_model, "vs_e2e"),
    }
    sharing = split_sharing_report(model_cfg, cfg.size, cfg.model_seed)
    return ExperimentResult(cfg, reports, trainable, sharing, ckpts, seconds)
