"""Batch-similarity and shift-census studies over a sample stream.

Similarities are reported as DTW *distances*: lower means more similar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .corpus import Sample
from .drift import DistributionSnapshot, MmdConfig, median_sigma, mmd_value
from .features import frequency_vector, pad_to


@numba.njit(cache=True)
def _dtw(x, y, absolute):
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            if absolute:
                cost = abs(x[i - 1] - y[j - 1])
            else:
                cost = 0.0 if x[i - 1] == y[j - 1] else 1.0
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = cost + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(x: Sequence[float], y: Sequence[float], cost: str = "equality") -> float:
    """Classic DTW with the three-way recurrence.

    ``cost="equality"`` charges 0/1 for equal/unequal event ids;
    ``cost="absolute"`` charges ``|a - b|`` for numeric sequences.
    """
    if len(x) == 0 or len(y) == 0:
        raise ValueError("DTW needs two non-empty sequences")
    if cost not in ("equality", "absolute"):
        raise ValueError(f"unknown cost {cost!r}")
    return float(_dtw(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), cost == "absolute"))


@dataclass
class SimilarityReport:
    internal: list[Optional[float]]
    external: list[Optional[float]]
    flagged: list[int] = field(default_factory=list)  # batches with < 2 samples
    history: int = 10

    def rows(self):
        for i, (a, b) in enumerate(zip(self.internal, self.external)):
            yield i, a, b

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("batch,internal_distance,external_distance\n")
            for i, a, b in self.rows():
                fh.write(f"{i},{'' if a is None else repr(a)},{'' if b is None else repr(b)}\n")


def _subsample(batch: Sequence[Sample], cap: Optional[int], rng: np.random.Generator) -> list[Sample]:
    if cap is None or len(batch) <= cap:
        return list(batch)
    idx = np.sort(rng.choice(len(batch), cap, replace=False))
    return [batch[i] for i in idx]


def similarity_report(batches: Sequence[Sequence[Sample]], history: int = 10, cap: Optional[int] = 20,
                      seed: int = 0, cost: str = "equality") -> SimilarityReport:
    """Mean pairwise DTW distance within each batch and against the previous ``history`` batches."""
    rng = np.random.default_rng(seed)
    subs = [_subsample(b, cap, rng) for b in batches]
    internal: list[Optional[float]] = []
    external: list[Optional[float]] = []
    flagged = []
    for k, batch in enumerate(subs):
        if len(batch) < 2:
            flagged.append(k)
            internal.append(None)
        else:
            d = [dtw_distance(batch[i].events, batch[j].events, cost)
                 for i in range(len(batch)) for j in range(i + 1, len(batch))]
            internal.append(float(np.mean(d)))
        past = [s for b in subs[max(0, k - history):k] for s in b]
        if not past or not batch:
            external.append(None)
        else:
            external.append(float(np.mean([dtw_distance(a.events, b.events, cost) for a in batch for b in past])))
    return SimilarityReport(internal, external, flagged, history)


@dataclass
class ShiftCensus:
    mmd: list[float]
    threshold: float
    below: int
    identical: int
    sigma: float

    @property
    def pairs(self) -> int:
        return len(self.mmd)

    @property
    def stable_fraction(self) -> float:
        return self.below / self.pairs if self.pairs else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("batch,previous,mmd,below_threshold\n")
            for i, v in enumerate(self.mmd, start=1):
                fh.write(f"{i},{i - 1},{v!r},{int(v < self.threshold)}\n")


def _identical(a: Sequence[Sample], b: Sequence[Sample]) -> bool:
    return len(a) == len(b) and all(x.events == y.events for x, y in zip(a, b))


def shift_census(batches: Sequence[Sequence[Sample]], threshold: float = 0.001,
                 sigma: Optional[float] = None, seed: int = 0) -> ShiftCensus:
    """MMD between each batch and its predecessor; sigma defaults to the median heuristic."""
    if len(batches) < 2:
        raise ValueError("a shift census needs at least two batches")
    vocab = max(e for b in batches for s in b for e in s.events) + 1
    snaps = [DistributionSnapshot(np.stack([frequency_vector(s, vocab) for s in b]),
                                  frozenset(e for s in b for e in s.events)) for b in batches]
    if sigma is None:
        sigma = median_sigma(np.concatenate([s.vectors for s in snaps]), seed=seed)
    cfg = MmdConfig(sigma)
    values = [mmd_value(p, q, cfg) for p, q in zip(snaps, snaps[1:])]
    below = sum(v < threshold for v in values)
    identical = sum(_identical(a, b) for a, b in zip(batches, batches[1:]))
    return ShiftCensus(values, threshold, below, identical, sigma)


def write_frequency_matrix(samples: Sequence[Sample], path, vocab_size: Optional[int] = None) -> np.ndarray:
    """One row per sample: index, label, then the normalised event histogram (for external projection)."""
    vocab = vocab_size or max(e for s in samples for e in s.events) + 1
    mat = pad_to(np.stack([frequency_vector(s, vocab) for s in samples]), vocab)
    with open(path, "w") as fh:
        fh.write("sample,label," + ",".join(f"e{i}" for i in range(vocab)) + "\n")
        for s, row in zip(samples, mat):
            lab = "" if s.label is None else s.label
            fh.write(f"{s.index},{lab}," + ",".join(repr(float(v)) for v in row) + "\n")
    return mat
