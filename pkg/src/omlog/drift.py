"""Batch-level distribution shift detection with a Gaussian-kernel MMD."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Sample
from .features import frequency_vector, pad_to


class Route(str, enum.Enum):
    ONLINE = "Online"
    OFFLINE = "Offline"


@dataclass
class DistributionSnapshot:
    vectors: np.ndarray  # (n, vocab) rows are L1-normalised histograms
    event_types: frozenset

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.shape[0] == 0:
            raise ValueError("a distribution snapshot needs at least one vector")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], vocab_size: int | None = None) -> "DistributionSnapshot":
        if not samples:
            raise ValueError("cannot snapshot an empty batch")
        types = frozenset(e for s in samples for e in s.events)
        size = max(types) + 1 if vocab_size is None else max(vocab_size, max(types) + 1)
        return cls(np.stack([frequency_vector(s, size) for s in samples]), types)

    @classmethod
    def from_vectors(cls, vectors) -> "DistributionSnapshot":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return cls(vectors, frozenset(np.flatnonzero(vectors.any(axis=0)).tolist()))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


@dataclass
class MmdConfig:
    sigma: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and positive, got {self.sigma}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class RouteDecision:
    route: Route
    mmd: float
    new_events: bool
    epsilon: float


def gaussian_kernel(u, v, sigma: float) -> float:
    """exp(-||u - v||^2 / sigma)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"kernel operands differ in shape: {u.shape} vs {v.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = u - v
    return float(np.exp(-np.dot(d, d) / sigma))


def squared_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # copying Y.T stops numpy from switching to a symmetric BLAS kernel when Y is X,
    # so equal-valued operands always give bit-identical results
    X = np.ascontiguousarray(X)
    sq = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * (X @ np.ascontiguousarray(Y.T))
    return np.maximum(sq, 0.0)


def kernel_matrix(X: np.ndarray, Y: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-squared_distances(X, Y) / sigma)


def _aligned(P: DistributionSnapshot, Q: DistributionSnapshot):
    dim = max(P.dim, Q.dim)
    return pad_to(P.vectors, dim), pad_to(Q.vectors, dim)


def mmd_value(P: DistributionSnapshot, Q: DistributionSnapshot, cfg: MmdConfig | float) -> float:
    """Biased squared-MMD estimate (i == j terms included), clamped at zero."""
    sigma = cfg.sigma if isinstance(cfg, MmdConfig) else float(cfg)
    X, Y = _aligned(P, Q)
    p, q = X.shape[0], Y.shape[0]
    kxx = kernel_matrix(X, X, sigma).sum()
    kxy = kernel_matrix(X, Y, sigma).sum()
    kyy = kernel_matrix(Y, Y, sigma).sum()
    value = kxx / (p * p) - 2.0 * kxy / (p * q) + kyy / (q * q)
    return max(float(value), 0.0)


def median_sigma(vectors: np.ndarray, max_vectors: int = 500, seed: int = 0) -> float:
    """Median pairwise squared distance over a bounded subsample; 1.0 when that median is 0."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] > max_vectors:
        idx = np.random.default_rng(seed).choice(vectors.shape[0], max_vectors, replace=False)
        vectors = vectors[np.sort(idx)]
    d = squared_distances(vectors, vectors)
    iu = np.triu_indices(vectors.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def calibrate(train_batches: Sequence[DistributionSnapshot], max_vectors: int = 500, seed: int = 0) -> MmdConfig:
    """Median-heuristic sigma; epsilon = mean consecutive-batch MMD / 10."""
    if len(train_batches) < 2:
        raise ValueError("calibration needs at least two training batches")
    dim = max(b.dim for b in train_batches)
    stacked = np.concatenate([pad_to(b.vectors, dim) for b in train_batches])
    cfg = MmdConfig(sigma=median_sigma(stacked, max_vectors, seed))
    values = [mmd_value(a, b, cfg) for a, b in zip(train_batches, train_batches[1:])]
    return MmdConfig(sigma=cfg.sigma, epsilon=epsilon_from_mmds(values))


def epsilon_from_mmds(values: Sequence[float]) -> float:
    return float(np.mean(values)) / 10.0


def has_new_events(cur: DistributionSnapshot, known_vocab_size: int) -> bool:
    return any(e >= known_vocab_size for e in cur.event_types)


def decide(prev: DistributionSnapshot, cur: DistributionSnapshot, known_vocab_size: int,
           cfg: MmdConfig) -> RouteDecision:
    """Online if the batch brings unseen event types or its MMD to the previous batch exceeds epsilon."""
    new = has_new_events(cur, known_vocab_size)
    value = mmd_value(prev, cur, cfg)
    route = Route.ONLINE if (new or value > cfg.epsilon) else Route.OFFLINE
    return RouteDecision(route, value, new, cfg.epsilon)
