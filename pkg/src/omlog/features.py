"""Model inputs derived from samples: next-event pairs, header vectors, event histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import Sample

DT_CLIP_SECONDS = 3600.0


class NextEventPair(NamedTuple):
    window: tuple[int, ...]
    target: int


def next_event_pairs(sample: Sample | Sequence[int], h: int) -> list[NextEventPair]:
    if h < 1:
        raise ValueError("window size h must be >= 1")
    events = sample.events if isinstance(sample, Sample) else list(sample)
    return [NextEventPair(tuple(events[i:i + h]), events[i + h]) for i in range(len(events) - h)]


def pair_arrays(samples: Sequence[Sample], h: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack the next-event pairs of many samples into (windows[N, h], targets[N])."""
    windows, targets = [], []
    for s in samples:
        ev = np.asarray(s.events, dtype=np.int64)
        if len(ev) <= h:
            continue
        windows.append(np.lib.stride_tricks.sliding_window_view(ev[:-1], h))
        targets.append(ev[h:])
    if not windows:
        return np.zeros((0, h), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(windows), np.concatenate(targets)


@dataclass
class HeaderEncoder:
    """Interns components and levels seen while fitting; the rest fall into one overflow slot each."""

    component_cap: int = 32
    level_cap: int = 8
    components: dict[str, int] = field(default_factory=dict)
    levels: dict[str, int] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return 1 + (self.component_cap + 1) + (self.level_cap + 1)

    def fit(self, samples: Sequence[Sample]) -> "HeaderEncoder":
        for s in samples:
            for hd in s.headers:
                if hd.component not in self.components and len(self.components) < self.component_cap:
                    self.components[hd.component] = len(self.components)
                if hd.level not in self.levels and len(self.levels) < self.level_cap:
                    self.levels[hd.level] = len(self.levels)
        return self

    def component_slot(self, name: str) -> int:
        return 1 + self.components.get(name, self.component_cap)

    def level_slot(self, name: str) -> int:
        return 2 + self.component_cap + self.levels.get(name, self.level_cap)

    def to_dict(self) -> dict:
        return {"component_cap": self.component_cap, "level_cap": self.level_cap,
                "components": self.components, "levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict) -> "HeaderEncoder":
        return cls(d["component_cap"], d["level_cap"], dict(d["components"]), dict(d["levels"]))


def delta_t_feature(dt: float) -> float:
    return math.log1p(min(max(dt, 0.0), DT_CLIP_SECONDS))


def header_features(sample: Sample, encoder: HeaderEncoder) -> np.ndarray:
    """One row per record: [log1p(clipped dt), component one-hot, level one-hot]."""
    n = len(sample.headers)
    out = np.zeros((n, encoder.dim))
    prev = None
    for i, hd in enumerate(sample.headers):
        dt = 0.0 if prev is None else hd.timestamp - prev
        prev = hd.timestamp
        out[i, 0] = delta_t_feature(dt)
        out[i, encoder.component_slot(hd.component)] = 1.0
        out[i, encoder.level_slot(hd.level)] = 1.0
    return out


def pooled_windows(features: np.ndarray, size: int = 10) -> np.ndarray:
    """Mean-pool consecutive chunks of ``size`` rows; a short final chunk is kept."""
    n = features.shape[0]
    return np.stack([features[i:i + size].mean(axis=0) for i in range(0, n, size)])


def frequency_vector(sample: Sample | Sequence[int], vocab_size: int) -> np.ndarray:
    """L1-normalised event histogram. An empty input gives the all-zero (degenerate) vector."""
    events = sample.events if isinstance(sample, Sample) else list(sample)
    counts = np.bincount(np.asarray(events, dtype=np.int64), minlength=vocab_size).astype(np.float64)
    if counts.shape[0] > vocab_size:
        raise ValueError(f"event id {counts.shape[0] - 1} outside vocabulary of size {vocab_size}")
    total = counts.sum()
    return counts / total if total > 0 else counts


def is_degenerate(vec: np.ndarray) -> bool:
    return not np.any(vec)


def pad_to(vectors: np.ndarray, dim: int) -> np.ndarray:
    vectors = np.atleast_2d(vectors)
    if vectors.shape[1] > dim:
        raise ValueError(f"cannot pad dimension {vectors.shape[1]} down to {dim}")
    if vectors.shape[1] == dim:
        return vectors
    return np.pad(vectors, ((0, 0), (0, dim - vectors.shape[1])))


def load_embeddings(path) -> dict[int, np.ndarray]:
    """Read ``event_id dim v1 ... vdim`` rows."""
    table = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            eid, dim = int(parts[0]), int(parts[1])
            values = np.array([float(v) for v in parts[2:]])
            if values.size != dim:
                raise ValueError(f"event {eid}: declared dim {dim}, found {values.size} values")
            table[eid] = values
    return table
