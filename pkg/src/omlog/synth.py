"""Markov regime-shift log generator with planted anomalies and exact-repeat batches.

Event ids in the output are renumbered by first appearance in the stream, the
same way a template miner would assign them, so "id >= vocabulary size" means
"never seen before".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import ABNORMAL, NORMAL, LogHeader, Sample

ANOMALY_TYPES = ("forbidden", "alien")


@dataclass
class Regime:
    alphabet: list[int]
    transitions: np.ndarray
    duration: int
    mean_dt: float = 1.0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        n = len(self.alphabet)
        if n == 0:
            raise ValueError("regime alphabet is empty")
        if self.transitions.shape != (n, n):
            raise ValueError(f"transition matrix must be {n}x{n}")
        if np.any(self.transitions < 0) or not np.allclose(self.transitions.sum(axis=1), 1.0):
            raise ValueError("degenerate transition matrix: rows must be non-negative and sum to 1")
        if self.duration < 1:
            raise ValueError("regime duration must be >= 1 sample")


@dataclass
class SyntheticSpec:
    regimes: list[Regime]
    sample_length: int = 40
    anomaly_rate: float = 0.1
    anomaly_types: tuple = ANOMALY_TYPES
    alien_events: list[int] = field(default_factory=lambda: [1000, 1001, 1002])
    n_components: int = 4
    batch_size: int = 100
    repeat_fraction: float = 0.0
    repeat_start: int = 0  # first batch index eligible for repeating its predecessor
    seed: int = 0

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("at least one regime is required")
        if not 0.0 <= self.anomaly_rate <= 1.0 or not 0.0 <= self.repeat_fraction < 1.0:
            raise ValueError("anomaly_rate must be in [0, 1], repeat_fraction in [0, 1)")
        for t in self.anomaly_types:
            if t not in ANOMALY_TYPES:
                raise ValueError(f"unknown anomaly type {t!r}")


@dataclass
class SyntheticStream:
    samples: list[Sample]
    shift_points: list[int]  # sample indices where a new regime starts
    shift_batches: list[int]
    repeat_batches: list[int]
    raw_to_id: dict[int, int]


def ring_regime(alphabet: list[int], duration: int, rng: np.random.Generator, successors: int = 2,
                mean_dt: float = 1.0) -> Regime:
    """Each event moves to its ring neighbour or to ``successors - 1`` other random events."""
    n = len(alphabet)
    T = np.zeros((n, n))
    for i in range(n):
        others = [j for j in range(n) if j != (i + 1) % n]
        picks = rng.choice(others, size=min(successors - 1, len(others)), replace=False)
        targets = [(i + 1) % n, *picks.tolist()]
        weights = rng.dirichlet(np.full(len(targets), 4.0))
        T[i, targets] = weights
    return Regime(list(alphabet), T, duration, mean_dt)


def _walk(regime: Regime, length: int, rng: np.random.Generator) -> list[int]:
    n = len(regime.alphabet)
    state = int(rng.integers(n))
    out = [state]
    for _ in range(length - 1):
        state = int(rng.choice(n, p=regime.transitions[state]))
        out.append(state)
    return out


def _inject(local: list[int], regime: Regime, spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    """Return raw event ids with one planted anomaly."""
    events = [regime.alphabet[i] for i in local]
    L = len(events)
    pos = int(rng.integers(L // 4, L))
    kind = spec.anomaly_types[int(rng.integers(len(spec.anomaly_types)))]
    if kind == "forbidden" and pos > 0:
        prev = local[pos - 1]
        banned = np.flatnonzero(regime.transitions[prev] == 0)
        if banned.size:
            new = int(rng.choice(banned))
            tail = [new]
            state = new
            for _ in range(L - pos - 1):
                state = int(rng.choice(len(regime.alphabet), p=regime.transitions[state]))
                tail.append(state)
            return events[:pos] + [regime.alphabet[i] for i in tail]
    events[pos] = int(spec.alien_events[int(rng.integers(len(spec.alien_events)))])
    return events


def synthesize(spec: SyntheticSpec) -> SyntheticStream:
    rng = np.random.default_rng(spec.seed)
    L = spec.sample_length
    raw: list[tuple[list[int], int, np.ndarray, np.ndarray]] = []  # (raw events, label, dts, levels)
    shift_points = []
    for r, regime in enumerate(spec.regimes):
        if r > 0:
            shift_points.append(len(raw))
        for _ in range(regime.duration):
            local = _walk(regime, L, rng)
            if rng.random() < spec.anomaly_rate:
                events, label = _inject(local, regime, spec, rng), ABNORMAL
            else:
                events, label = [regime.alphabet[i] for i in local], NORMAL
            dts = rng.exponential(regime.mean_dt, size=len(events))
            if label == ABNORMAL:
                levels = np.full(len(events), "FATAL")
            else:
                levels = np.where(rng.random(len(events)) < 0.1, "WARN", "INFO")
            raw.append((events, label, dts, levels))

    B = spec.batch_size
    n_batches = -(-len(raw) // B)
    shift_batches = sorted({p // B for p in shift_points})
    repeats: list[int] = []
    if spec.repeat_fraction > 0:
        span = range(spec.repeat_start, n_batches)
        eligible = [b for b in span if b > spec.repeat_start and b not in shift_batches
                    and (b + 1) * B <= len(raw)]
        want = min(int(round(spec.repeat_fraction * len(span))), len(eligible))
        repeats = sorted(rng.choice(eligible, size=want, replace=False).tolist())
        for b in repeats:
            # in ascending order, so a run of repeats keeps copying the same content
            raw[b * B:(b + 1) * B] = raw[(b - 1) * B:b * B]

    mapping: dict[int, int] = {}
    samples = []
    t = 0.0
    for idx, (events, label, dts, levels) in enumerate(raw):
        ids = [mapping.setdefault(e, len(mapping)) for e in events]
        headers = []
        for e, dt, lvl in zip(events, dts, levels):
            t += float(dt)
            headers.append(LogHeader(t, f"comp{e % spec.n_components}", str(lvl)))
        samples.append(Sample(ids, headers, label, ("synthetic", idx * L, idx)))
    return SyntheticStream(samples, shift_points, shift_batches, repeats, mapping)


def drifted_spec(seed: int = 0, sample_length: int = 40, anomaly_rate: float = 0.1,
                 durations=(1250, 625, 625), batch_size: int = 100) -> SyntheticSpec:
    """Three regimes: a base regime, one that swaps in new events, and one that rewires the base events."""
    rng = np.random.default_rng([seed, 11])
    base = list(range(12))
    mixed = list(range(6, 18))
    return SyntheticSpec(
        regimes=[ring_regime(base, durations[0], rng),
                 ring_regime(mixed, durations[1], rng),
                 ring_regime(base, durations[2], rng)],
        sample_length=sample_length, anomaly_rate=anomaly_rate, batch_size=batch_size, seed=seed)


def stable_spec(seed: int = 0, sample_length: int = 40, anomaly_rate: float = 0.1, train_batches: int = 10,
                test_batches: int = 50, repeat_fraction: float = 0.62, batch_size: int = 100) -> SyntheticSpec:
    """Two disjoint-alphabet regimes where ``repeat_fraction`` of test batches replay their predecessor."""
    rng = np.random.default_rng([seed, 13])
    first = (train_batches + test_batches // 5) * batch_size
    second = (test_batches - test_batches // 5) * batch_size
    return SyntheticSpec(
        regimes=[ring_regime(list(range(12)), first, rng), ring_regime(list(range(100, 112)), second, rng)],
        sample_length=sample_length, anomaly_rate=anomaly_rate, batch_size=batch_size,
        repeat_fraction=repeat_fraction, repeat_start=train_batches, seed=seed)


def single_regime_spec(seed: int = 0, duration: int = 500, anomaly_rate: float = 0.0,
                       sample_length: int = 40) -> SyntheticSpec:
    rng = np.random.default_rng([seed, 17])
    return SyntheticSpec([ring_regime(list(range(12)), duration, rng)], sample_length=sample_length,
                         anomaly_rate=anomaly_rate, seed=seed)


PRESETS = {"drifted": drifted_spec, "stable": stable_spec, "single": single_regime_spec}
