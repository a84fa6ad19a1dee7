"""Online meta-learning detection: temporal-nearest support sets and sequential episodes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import neural as nn
from .corpus import Sample
from .detectors import (DetectionVerdict, NextEventModel, NormalityModel, fit_epochs, normality_filter,
                        score_samples)
from .features import HeaderEncoder, pair_arrays

log = logging.getLogger(__name__)


@dataclass
class EpisodeConfig:
    tasks_per_batch: int = 10
    support_size: int = 10
    inner_epochs: int = 5
    inner_lr: float = 1e-5
    batch_size: int = 64
    objective: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")
        if self.support_size < 0 or self.inner_epochs < 0 or self.inner_lr < 0:
            raise ValueError("support_size, inner_epochs and inner_lr must be >= 0")
        if self.objective not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class MetaTask:
    support: list[Sample]
    query: list[Sample]
    index: int


@dataclass
class EpisodeResult:
    verdicts: list[DetectionVerdict]
    loss_sum: float
    loss_mean: float
    windows: int
    steps: int
    aborted: bool = False
    seconds: float = 0.0


@dataclass
class TaskBatchResult:
    verdicts: list[DetectionVerdict]
    meta_loss: float
    batch_term: float
    task_losses: list[float] = field(default_factory=list)
    support_sizes: list[int] = field(default_factory=list)
    task_seconds: list[float] = field(default_factory=list)
    update_steps: int = 0
    normals: int = 0
    aborted: int = 0
    model: NextEventModel | None = None


def nearest_support(normals: Sequence[Sample], anchor: float, n: int) -> list[Sample]:
    """The ``n`` normals closest to ``anchor`` by origin index; ties go to the earlier sample."""
    if n <= 0 or not normals:
        return []
    order = sorted(range(len(normals)), key=lambda i: (abs(anchor - normals[i].index), normals[i].index, i))
    return [normals[i] for i in order[:n]]


def build_meta_tasks(batch: Sequence[Sample], normals: Sequence[Sample], cfg: EpisodeConfig) -> list[MetaTask]:
    if not batch:
        raise ValueError("cannot build meta-tasks from an empty batch")
    slices = np.array_split(np.arange(len(batch)), min(cfg.tasks_per_batch, len(batch)))
    tasks = []
    for t, idx in enumerate(slices):
        query = [batch[i] for i in idx]
        anchor = float(np.median([s.index for s in query]))
        tasks.append(MetaTask(nearest_support(normals, anchor, cfg.support_size), query, t))
    return tasks


def query_loss(model: NextEventModel, samples: Sequence[Sample], objective: str) -> tuple[float, int]:
    """(sum, count) of per-window objective values over the samples' next-event pairs."""
    X, y = pair_arrays(samples, model.h)
    if X.shape[0] == 0:
        return 0.0, 0
    value, _ = model.loss(X, y, objective, name="query")
    return value * X.shape[0], X.shape[0]


def run_episode(model: NextEventModel, task: MetaTask, cfg: EpisodeConfig) -> EpisodeResult:
    """Fine-tune on the support set, then score the query set with the updated weights."""
    start = time.perf_counter()
    steps, aborted = 0, False
    X, y = pair_arrays(task.support, model.h)
    if X.shape[0] and cfg.inner_epochs and cfg.inner_lr > 0:
        snap = model.store.snapshot()
        sgd = nn.SgdConfig(learning_rate=cfg.inner_lr, epochs=cfg.inner_epochs, eval_every=max(cfg.inner_epochs, 1),
                           batch_size=cfg.batch_size, seed=cfg.seed)
        try:
            hist = fit_epochs(model.store, lambda idx: model.loss_and_grad(X[idx], y[idx], cfg.objective),
                              X.shape[0], sgd, seed_offset=1000 + task.index)
            steps = hist.steps
            for name, p in model.store.params.items():
                nn.check_finite(name, p)
        except nn.NonFiniteError as exc:
            log.warning("episode %d aborted (%s); restoring pre-episode weights", task.index, exc)
            model.store.restore(snap)
            steps, aborted = 0, True
    verdicts = score_samples(model, task.query)
    loss_sum, windows = query_loss(model, task.query, cfg.objective)
    return EpisodeResult(verdicts, loss_sum, loss_sum / windows if windows else 0.0, windows, steps, aborted,
                         time.perf_counter() - start)


def detect_batch(model: NextEventModel, batch: Sequence[Sample], normality: NormalityModel,
                 encoder: HeaderEncoder, cfg: EpisodeConfig, batch_number: int = 1) -> TaskBatchResult:
    """Grow for unseen events, filter normals, then run the episodes in task order on the live model."""
    needed = max(max(s.events) for s in batch) + 1
    model.grow(max(needed, model.vocab_size))
    normals = normality_filter(normality, encoder, batch)
    tasks = build_meta_tasks(batch, normals, cfg)
    verdicts: list[DetectionVerdict] = []
    res = TaskBatchResult([], 0.0, 0.0, model=model, normals=len(normals))
    total = 0.0
    for task in tasks:
        ep = run_episode(model, task, cfg)
        verdicts.extend(ep.verdicts)
        total += ep.loss_sum
        res.task_losses.append(ep.loss_mean)
        res.support_sizes.append(len(task.support))
        res.task_seconds.append(ep.seconds)
        res.update_steps += ep.steps
        res.aborted += int(ep.aborted)
    res.verdicts = verdicts
    res.batch_term = total / len(tasks)
    res.meta_loss = res.batch_term / max(batch_number, 1)
    return res
