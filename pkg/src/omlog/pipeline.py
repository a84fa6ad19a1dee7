"""Streaming harness: batch the test stream, route each batch, detect, and score."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import neural as nn
from .corpus import ABNORMAL, Sample
from .detectors import (DetectionVerdict, NextEventModel, NormalityModel, fit_epochs, normality_filter,
                        normality_windows, score_samples, train_initial, train_normality)
from .drift import DistributionSnapshot, MmdConfig, Route, calibrate, decide
from .features import HeaderEncoder, pair_arrays
from .meta import EpisodeConfig, detect_batch

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"
    ONLINE_DSD = "online-dsd"
    META = "meta"
    OMLOG = "omlog"

    @property
    def uses_dsd(self) -> bool:
        return self in (Mode.ONLINE_DSD, Mode.OMLOG)

    @property
    def uses_meta(self) -> bool:
        return self in (Mode.META, Mode.OMLOG)


@dataclass
class ModelConfig:
    h: int = 10
    embed_dim: int = 16
    hidden_size: int = 64
    top_k: int = 9
    objective: str = "cross_entropy"


@dataclass
class NormalityConfig:
    code_dim: int = 8
    threshold: float = 0.02
    window: int = 10
    component_cap: int = 32
    level_cap: int = 8
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)


@dataclass
class DriftConfig:
    epsilon_multiplier: float = 1.0
    epsilon: Optional[float] = None  # overrides the calibrated value when set
    sigma: Optional[float] = None
    max_vectors: int = 500


@dataclass
class StreamConfig:
    batch_size: int = 100
    mode: Mode = Mode.OMLOG
    seed: int = 0
    online_epochs: int = 1
    validation_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    normality: NormalityConfig = field(default_factory=NormalityConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        norm = dict(d.pop("normality", {}))
        norm["sgd"] = nn.SgdConfig(**norm.get("sgd", {}))
        return cls(model=ModelConfig(**d.pop("model", {})), train=nn.SgdConfig(**d.pop("train", {})),
                   normality=NormalityConfig(**norm), episode=EpisodeConfig(**d.pop("episode", {})),
                   drift=DriftConfig(**d.pop("drift", {})), **d)


# -- metrics -------------------------------------------------------------------

@dataclass
class Metrics:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    undefined: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        undefined = []
        if tp + fp:
            precision = tp / (tp + fp)
        else:
            precision = 0.0
            undefined.append("precision")
        if tp + fn:
            recall = tp / (tp + fn)
        else:
            recall = 0.0
            undefined.append("recall")
        if precision + recall:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            undefined.append("f1")
        return cls(tp, fp, tn, fn, precision, recall, f1, undefined)


def evaluate(verdicts: Sequence, labels: Sequence[int]) -> Metrics:
    """Confusion counts with abnormal as the positive class."""
    if len(verdicts) != len(labels):
        raise ValueError(f"{len(verdicts)} verdicts but {len(labels)} labels")
    pred = np.array([v.anomalous if isinstance(v, DetectionVerdict) else bool(v) for v in verdicts], dtype=bool)
    if any(lab is None for lab in labels):
        raise ValueError("cannot evaluate unlabeled samples")
    truth = np.array([lab == ABNORMAL for lab in labels], dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return Metrics.from_counts(tp, fp, tn, fn)


# -- trained bundle ------------------------------------------------------------

@dataclass
class Detector:
    model: NextEventModel
    normality: NormalityModel
    encoder: HeaderEncoder
    mmd: MmdConfig
    reference: np.ndarray  # frequency vectors of the last training batch
    train_seconds: float = 0.0
    history: dict = field(default_factory=dict)

    def save(self, directory) -> Path:
        directory = Path(directory)
        nn.save_checkpoint(directory / "next_event", self.model.store, self.model.manifest())
        nn.save_checkpoint(directory / "normality", self.normality.store, self.normality.manifest())
        ref = nn.ParameterStore()
        ref.add("reference", self.reference)
        nn.save_checkpoint(directory / "drift", ref, {"sigma": self.mmd.sigma, "epsilon": self.mmd.epsilon})
        extra = {"encoder": self.encoder.to_dict(), "train_seconds": self.train_seconds, "history": self.history}
        (directory / "detector.json").write_text(json.dumps(extra, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Detector":
        directory = Path(directory)
        if not (directory / "detector.json").exists():
            raise FileNotFoundError(f"missing checkpoint: {directory} has no detector.json (run `train` first)")
        store, man = nn.load_checkpoint(directory / "next_event")
        model = NextEventModel.from_checkpoint(store, man)
        store, man = nn.load_checkpoint(directory / "normality")
        normality = NormalityModel.from_checkpoint(store, man)
        ref, man = nn.load_checkpoint(directory / "drift")
        extra = json.loads((directory / "detector.json").read_text())
        return cls(model, normality, HeaderEncoder.from_dict(extra["encoder"]),
                   MmdConfig(man["sigma"], man["epsilon"]), ref["reference"].copy(),
                   extra.get("train_seconds", 0.0), extra.get("history", {}))


def batches_of(samples: Sequence[Sample], size: int) -> list[list[Sample]]:
    return [list(samples[i:i + size]) for i in range(0, len(samples), size)]


def fit_detector(train: Sequence[Sample], cfg: StreamConfig) -> Detector:
    """Train both models on the normal training samples and calibrate the shift threshold."""
    start = time.perf_counter()
    train = [s for s in train if s.label != ABNORMAL]
    if not train:
        raise ValueError("no normal training samples")
    n_val = int(len(train) * cfg.validation_fraction)
    fit_part, val_part = (train[:-n_val], train[-n_val:]) if n_val else (train, [])

    mc = cfg.model
    vocab = max(max(s.events) for s in train) + 1
    model = NextEventModel(vocab, mc.h, mc.embed_dim, mc.hidden_size, mc.top_k, cfg.seed, mc.objective)
    hist = train_initial(model, fit_part, dataclasses.replace(cfg.train, seed=cfg.seed), val_part or None)

    nc = cfg.normality
    encoder = HeaderEncoder(nc.component_cap, nc.level_cap).fit(train)
    normality = NormalityModel(encoder.dim, nc.code_dim, nc.threshold, nc.window, cfg.seed)
    nhist = train_normality(normality, normality_windows(train, encoder, nc.window),
                            dataclasses.replace(nc.sgd, seed=cfg.seed))

    batches = batches_of(train, cfg.batch_size)
    snaps = [DistributionSnapshot.from_samples(b, model.vocab_size) for b in batches]
    dc = cfg.drift
    if len(snaps) >= 2:
        mmd = calibrate(snaps, dc.max_vectors, cfg.seed)
    else:
        log.warning("only one training batch; epsilon defaults to 0")
        mmd = MmdConfig()
    if dc.sigma is not None:
        mmd = MmdConfig(dc.sigma, mmd.epsilon)
    history = {"next_event_loss": hist.losses, "best_epoch": hist.best_epoch, "normality_loss": nhist.losses,
               "train_steps": hist.steps + nhist.steps}
    return Detector(model, normality, encoder, mmd, snaps[-1].vectors, time.perf_counter() - start, history)


# -- streaming -----------------------------------------------------------------

@dataclass
class BatchRecord:
    index: int
    size: int
    route: str
    mmd: Optional[float]
    epsilon: Optional[float]
    new_events: bool
    update_steps: int
    normals: int
    support_sizes: list[int]
    task_losses: list[float]
    meta_loss: Optional[float]
    flagged: int
    seconds: float = 0.0
    dsd_seconds: float = 0.0


@dataclass
class RunReport:
    config: dict
    mode: str
    batches: list[BatchRecord]
    verdicts: list[dict]
    metrics: Metrics
    update_steps: int
    online_batches: int
    untested: int
    vocab_size: int
    train_seconds: float = 0.0
    test_seconds: float = 0.0

    def to_dict(self, timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timings:
            d.pop("train_seconds")
            d.pop("test_seconds")
            for b in d["batches"]:
                b.pop("seconds")
                b.pop("dsd_seconds")
        return d

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))
        with open(directory / "batches.csv", "w") as fh:
            fh.write("batch,size,route,mmd,epsilon,new_events,update_steps,normals,flagged,meta_loss,seconds\n")
            for b in self.batches:
                fh.write(f"{b.index},{b.size},{b.route},{_fmt(b.mmd)},{_fmt(b.epsilon)},{int(b.new_events)},"
                         f"{b.update_steps},{b.normals},{b.flagged},{_fmt(b.meta_loss)},{b.seconds:.6f}\n")
        with open(directory / "meta.csv", "w") as fh:
            fh.write("batch,task,support_size,task_loss\n")
            for b in self.batches:
                for t, (n, loss) in enumerate(zip(b.support_sizes, b.task_losses)):
                    fh.write(f"{b.index},{t},{n},{loss!r}\n")
        with open(directory / "verdicts.csv", "w") as fh:
            fh.write("sample,anomalous,offending,score,label\n")
            for v in self.verdicts:
                off = "" if v["offending"] is None else v["offending"]
                fh.write(f"{v['sample']},{int(v['anomalous'])},{off},{v['score']!r},{v['label']}\n")
        return directory


def _fmt(x):
    return "" if x is None else repr(x)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(type(o))


def online_update(model: NextEventModel, batch: Sequence[Sample], detector: Detector, cfg: StreamConfig,
                  batch_number: int) -> tuple[list[DetectionVerdict], int, int]:
    """Batch-level online update: filter normals, fine-tune on all of them, then score the batch."""
    model.grow(max(model.vocab_size, max(max(s.events) for s in batch) + 1))
    normals = normality_filter(detector.normality, detector.encoder, batch)
    X, y = pair_arrays(normals, model.h)
    steps = 0
    ep = cfg.episode
    if X.shape[0] and cfg.online_epochs and ep.inner_lr > 0:
        sgd = nn.SgdConfig(learning_rate=ep.inner_lr, epochs=cfg.online_epochs, eval_every=max(cfg.online_epochs, 1),
                           batch_size=ep.batch_size, seed=cfg.seed)
        snap = model.store.snapshot()
        try:
            steps = fit_epochs(model.store, lambda idx: model.loss_and_grad(X[idx], y[idx], ep.objective),
                               X.shape[0], sgd, seed_offset=batch_number).steps
        except nn.NonFiniteError as exc:
            log.warning("online update on batch %d aborted (%s)", batch_number, exc)
            model.store.restore(snap)
            steps = 0
    return score_samples(model, batch), steps, len(normals)


def run_stream(train: Sequence[Sample], test: Sequence[Sample], cfg: StreamConfig,
               detector: Detector | None = None) -> RunReport:
    if not test:
        raise ValueError("empty test stream")
    if detector is None:
        detector = fit_detector(train, cfg)
    model = detector.model.copy()
    eps = detector.mmd.epsilon if cfg.drift.epsilon is None else cfg.drift.epsilon
    eps = eps * cfg.drift.epsilon_multiplier if math.isfinite(eps) else eps
    if math.isnan(eps):
        eps = 0.0
    mmd_cfg = MmdConfig(detector.mmd.sigma, eps)
    ep_cfg = dataclasses.replace(cfg.episode, seed=cfg.seed)
    prev = DistributionSnapshot.from_vectors(detector.reference)

    records: list[BatchRecord] = []
    verdicts: list[DetectionVerdict] = []
    start = time.perf_counter()
    for k, batch in enumerate(batches_of(test, cfg.batch_size), start=1):
        t0 = time.perf_counter()
        snap = DistributionSnapshot.from_samples(batch)
        decision = None
        if cfg.mode.uses_dsd:
            decision = decide(prev, snap, model.vocab_size, mmd_cfg)
        t_dsd = time.perf_counter() - t0
        online = cfg.mode in (Mode.ONLINE, Mode.META) or (decision is not None and decision.route == Route.ONLINE)
        supports, losses, meta_loss, normals, steps = [], [], None, 0, 0
        if not online:
            out = score_samples(model, batch)
        elif cfg.mode.uses_meta:
            res = detect_batch(model, batch, detector.normality, detector.encoder, ep_cfg, k)
            out, steps, normals = res.verdicts, res.update_steps, res.normals
            supports, losses, meta_loss = res.support_sizes, res.task_losses, res.meta_loss
        else:
            out, steps, normals = online_update(model, batch, detector, cfg, k)
        verdicts.extend(out)
        prev = snap
        records.append(BatchRecord(
            k, len(batch), (Route.ONLINE if online else Route.OFFLINE).value,
            None if decision is None else decision.mmd, None if decision is None else decision.epsilon,
            bool(decision.new_events) if decision is not None else False, steps, normals, supports, losses,
            meta_loss, sum(v.anomalous for v in out), time.perf_counter() - t0, t_dsd))
    test_seconds = time.perf_counter() - start

    labels = [s.label for s in test]
    metrics = evaluate(verdicts, labels) if all(lab is not None for lab in labels) else Metrics()
    rows = [{"sample": s.index, "anomalous": v.anomalous, "offending": v.offending, "score": v.score,
             "label": s.label} for s, v in zip(test, verdicts)]
    return RunReport(cfg.to_dict(), cfg.mode.value, records, rows, metrics,
                     sum(r.update_steps for r in records), sum(r.route == Route.ONLINE.value for r in records),
                     sum(not v.tested for v in verdicts), model.vocab_size, detector.train_seconds, test_seconds)


def sweep(train: Sequence[Sample], test: Sequence[Sample], base: StreamConfig, epsilon_grid: Sequence[float],
          tasks_grid: Sequence[int], detector: Detector | None = None) -> tuple[list[dict], list[RunReport]]:
    """One run per (epsilon multiplier, T) pair against a shared initial detector."""
    if detector is None:
        detector = fit_detector(train, base)
    rows, reports = [], []
    for mult in epsilon_grid:
        for T in tasks_grid:
            cfg = dataclasses.replace(base, drift=dataclasses.replace(base.drift, epsilon_multiplier=mult),
                                      episode=dataclasses.replace(base.episode, tasks_per_batch=T))
            rep = run_stream(train, test, cfg, detector)
            reports.append(rep)
            rows.append({"epsilon_multiplier": mult, "tasks": T, "f1": rep.metrics.f1,
                         "precision": rep.metrics.precision, "recall": rep.metrics.recall,
                         "online_batches": rep.online_batches, "update_steps": rep.update_steps,
                         "test_seconds": rep.test_seconds})
    return rows, reports
