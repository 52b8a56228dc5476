"""Desk-scale experiment profile shared by the acceptance suite and scripts/.

8 scenes x 8 frames at 64x64, 500 steps of batch 4, evaluated on frames of
scenes never seen in training.  The two loss-weight/optimizer settings that
differ from the library defaults are collected here (see README).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import LossReport, LossWeights
from .metrics import evaluate, summarize
from .model import ModelConfig
from .synth import RainParams, TimeLapseScene, gen_dataset
from .train import MetricsWriter, TimeLapseDataset, TrainConfig, TrainState, train


@dataclass(frozen=True)
class ToyProfile:
    n_scenes: int = 8
    frames: int = 8
    size: int = 64
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    data_seed: int = 0
    heldout_scenes: int = 4
    heldout_seed: int = 1000
    # the library defaults are lr0 = 2e-4, lambda_c = 1e-3; at 500 steps those
    # leave the background head collapsed onto a near-constant image
    lr0: float = 1e-3
    lambda_c: float = 0.5
    rain: RainParams = field(default_factory=RainParams)


@dataclass
class ToyRun:
    state: TrainState
    model_cfg: ModelConfig
    cfg: TrainConfig
    reports: list[LossReport]
    lrs: list[float]
    seconds: float

    def mean_total(self, first: int, last: int) -> float:
        """Mean total loss over 1-based steps first..last inclusive."""
        return float(np.mean([r.total for r in self.reports[first - 1:last]]))

    def mean_loss_w(self, last_n: int = 10) -> float:
        return float(np.mean([r.loss_w for r in self.reports[-last_n:]]))


def toy_configs(profile: ToyProfile = ToyProfile(), use_memory: bool = True,
                lambda_w: Optional[float] = None) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(input_size=profile.size, use_memory=use_memory)
    w = LossWeights(lambda_c=profile.lambda_c)
    if lambda_w is not None:
        w = replace(w, lambda_w=lambda_w)
    cfg = TrainConfig(batch_size=profile.batch_size, lr0=profile.lr0, total_steps=profile.steps,
                      seed=profile.seed, weights=w)
    return model_cfg, cfg


def toy_data(profile: ToyProfile = ToyProfile()) -> tuple[list[TimeLapseScene], list[TimeLapseScene]]:
    train_scenes = gen_dataset(profile.n_scenes, profile.frames, profile.size, profile.data_seed, profile.rain)
    heldout = gen_dataset(profile.heldout_scenes, profile.frames, profile.size, profile.heldout_seed, profile.rain)
    return train_scenes, heldout


def run_toy(scenes, model_cfg: ModelConfig, cfg: TrainConfig, metrics_path=None,
            until: Optional[int] = None, log_every: int = 0) -> ToyRun:
    dataset = TimeLapseDataset.from_scenes(scenes)
    state = TrainState.fresh(model_cfg, cfg)
    reports, lrs = [], []
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    t0 = time.perf_counter()
    try:
        for step, lr, rep in train(dataset, model_cfg, cfg, state, until=until):
            reports.append(rep)
            lrs.append(lr)
            if writer:
                writer.write(step, lr, rep)
            if log_every and step % log_every == 0:
                print(f"step {step:4d} total {rep.total:.5f} L_b {rep.loss_b:.5f} L_s {rep.loss_s:.5f} "
                      f"L_c {rep.loss_c:.5f} L_w {rep.loss_w:.3e}", flush=True)
    finally:
        if writer:
            writer.close()
    return ToyRun(state, model_cfg, cfg, reports, lrs, time.perf_counter() - t0)


def heldout_scores(run: ToyRun, scenes) -> dict:
    rows = evaluate([(s.scene_id, s.frames, s.background) for s in scenes],
                    run.model_cfg, run.state.params, run.state.memory)
    return summarize(rows)


def write_metrics(path, lrs, reports) -> Path:
    path = Path(path)
    with MetricsWriter(path) as w:
        for i, (lr, rep) in enumerate(zip(lrs, reports), 1):
            w.write(i, lr, rep)
    return path
