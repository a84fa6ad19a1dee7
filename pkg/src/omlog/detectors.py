"""Next-event LSTM detector (Top-K rule, growable classifier) and header autoencoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import neural as nn
from .corpus import Sample
from .features import HeaderEncoder, header_features, pair_arrays, pooled_windows

log = logging.getLogger(__name__)


@dataclass
class DetectionVerdict:
    origin: tuple
    anomalous: bool
    offending: Optional[int] = None
    score: float = 0.0
    tested: bool = True

    def __post_init__(self):
        if self.anomalous != (self.offending is not None):
            raise ValueError("an anomalous verdict must name its offending window and only then")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    eval_epochs: list[int] = field(default_factory=list)
    eval_scores: list[float] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def _minibatches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class NextEventModel:
    """Embedding -> single LSTM cell unrolled over h steps -> linear classifier over events."""

    def __init__(self, vocab_size: int, h: int = 10, embed_dim: int = 16, hidden_size: int = 64,
                 top_k: int = 9, seed: int = 0, objective: str = "cross_entropy"):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.h = h
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.top_k = top_k
        self.seed = seed
        self.objective = objective
        rng = np.random.default_rng(seed)
        H, d = hidden_size, embed_dim
        self.store = nn.ParameterStore()
        self.store.add("embedding", nn.init_uniform(rng, (vocab_size, d), 1))
        self.store.add("lstm.Wx", nn.init_uniform(rng, (d, 4 * H), d))
        self.store.add("lstm.Wh", nn.init_uniform(rng, (H, 4 * H), H))
        self.store.add("lstm.b", nn.init_uniform(rng, (4 * H,), H))
        self.store.add("classifier.W", nn.init_uniform(rng, (vocab_size, H), H))
        self.store.add("classifier.b", nn.init_uniform(rng, (vocab_size,), H))

    @property
    def vocab_size(self) -> int:
        return self.store["classifier.b"].shape[0]

    def manifest(self) -> dict:
        return {"kind": "next_event", "vocab_size": self.vocab_size, "h": self.h, "embed_dim": self.embed_dim,
                "hidden_size": self.hidden_size, "top_k": self.top_k, "seed": self.seed,
                "objective": self.objective}

    @classmethod
    def from_checkpoint(cls, store: nn.ParameterStore, manifest: dict) -> "NextEventModel":
        m = cls(manifest["vocab_size"], manifest["h"], manifest["embed_dim"], manifest["hidden_size"],
                manifest["top_k"], manifest["seed"], manifest.get("objective", "cross_entropy"))
        m.store.restore(store.params)
        return m

    def copy(self) -> "NextEventModel":
        return NextEventModel.from_checkpoint(self.store, self.manifest())

    # -- forward / backward
    def forward(self, windows: np.ndarray):
        windows = np.asarray(windows, dtype=np.int64)
        if windows.ndim != 2:
            raise nn.ShapeError(f"windows must be 2-D (batch, h), got shape {windows.shape}")
        s = self.store
        emb, emb_cache = nn.embedding_forward(windows, s["embedding"])
        B = windows.shape[0]
        h = np.zeros((B, self.hidden_size))
        c = np.zeros((B, self.hidden_size))
        caches = []
        for t in range(windows.shape[1]):
            (h, c), cache = nn.lstm_cell_forward(emb[:, t, :], h, c, s["lstm.Wx"], s["lstm.Wh"], s["lstm.b"])
            caches.append(cache)
        # einsum (no BLAS) keeps each class logit independent of the class count,
        # so growing the classifier leaves old logits bit-identical.
        logits = np.einsum("bh,vh->bv", h, s["classifier.W"], optimize=False) + s["classifier.b"]
        return logits, (emb_cache, caches, h)

    def backward(self, dlogits: np.ndarray, cache) -> None:
        s = self.store
        emb_cache, caches, h_last = cache
        s.set_grad("classifier.W", dlogits.T @ h_last)
        s.set_grad("classifier.b", dlogits.sum(axis=0))
        dh = dlogits @ s["classifier.W"]
        dc = np.zeros_like(dh)
        dWx = np.zeros_like(s["lstm.Wx"])
        dWh = np.zeros_like(s["lstm.Wh"])
        db = np.zeros_like(s["lstm.b"])
        ids = emb_cache[0]
        demb = np.zeros(ids.shape + (self.embed_dim,))
        for t in range(len(caches) - 1, -1, -1):
            dx, dh, dc, gWx, gWh, gb = nn.lstm_cell_backward(dh, dc, caches[t])
            dWx += gWx
            dWh += gWh
            db += gb
            demb[:, t, :] = dx
        s.set_grad("lstm.Wx", dWx)
        s.set_grad("lstm.Wh", dWh)
        s.set_grad("lstm.b", db)
        s.set_grad("embedding", nn.embedding_backward(demb, emb_cache))

    def loss(self, windows, targets, objective: str | None = None, name: str = "next_event") -> tuple[float, tuple]:
        logits, cache = self.forward(windows)
        fn = nn.softmax_mse if (objective or self.objective) == "mse" else nn.softmax_cross_entropy
        value, dlogits = fn(logits, np.asarray(targets, dtype=np.int64), name=name)
        return value, (dlogits, cache)

    def loss_and_grad(self, windows, targets, objective: str | None = None) -> float:
        value, (dlogits, cache) = self.loss(windows, targets, objective)
        self.backward(dlogits, cache)
        return value

    def logits(self, windows: np.ndarray, chunk: int = 4096) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.int64)
        if windows.shape[0] == 0:
            return np.zeros((0, self.vocab_size))
        return np.concatenate([self.forward(windows[i:i + chunk])[0] for i in range(0, windows.shape[0], chunk)])

    # -- vocabulary growth
    def grow(self, new_vocab_size: int) -> bool:
        """Append embedding/classifier rows for new events. Returns True if anything grew."""
        old = self.vocab_size
        if new_vocab_size < old:
            raise ValueError(f"cannot shrink classifier from {old} to {new_vocab_size}")
        if new_vocab_size == old:
            return False
        extra = new_vocab_size - old
        rng = np.random.default_rng([self.seed, old, new_vocab_size])
        s = self.store
        s.replace("embedding", np.vstack([s["embedding"], nn.init_uniform(rng, (extra, self.embed_dim), 1)]))
        H = self.hidden_size
        s.replace("classifier.W", np.vstack([s["classifier.W"], nn.init_uniform(rng, (extra, H), H)]))
        s.replace("classifier.b", np.concatenate([s["classifier.b"], nn.init_uniform(rng, (extra,), H)]))
        return True

    def import_embeddings(self, table: dict[int, np.ndarray]) -> int:
        E = self.store["embedding"]
        n = 0
        for eid, vec in table.items():
            if eid < E.shape[0]:
                if vec.shape != (self.embed_dim,):
                    raise nn.ShapeError(f"embedding for event {eid} has dim {vec.shape}, model uses {self.embed_dim}")
                E[eid] = vec
                n += 1
        return n


# -- training ------------------------------------------------------------------

def fit_epochs(store: nn.ParameterStore, step_fn, n: int, cfg: nn.SgdConfig, lr: float | None = None,
               epochs: int | None = None, seed_offset: int = 0, evaluate=None) -> TrainHistory:
    """Generic shuffled mini-batch SGD loop. ``step_fn(idx)`` returns the batch loss and fills grads.

    ``evaluate()`` (lower is better) is called every ``cfg.eval_every`` epochs;
    the best snapshot is restored at the end.
    """
    lr = cfg.learning_rate if lr is None else lr
    epochs = cfg.epochs if epochs is None else epochs
    hist = TrainHistory()
    best_score, best_snap = np.inf, None
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([cfg.seed, seed_offset, epoch])
        total = 0.0
        for idx in _minibatches(n, cfg.batch_size, rng):
            total += step_fn(idx) * len(idx)
            nn.sgd_step(store, lr)
            hist.steps += 1
        hist.losses.append(total / n)
        if evaluate is not None and (epoch % cfg.eval_every == 0 or epoch == epochs):
            score = evaluate()
            hist.eval_epochs.append(epoch)
            hist.eval_scores.append(score)
            if score < best_score:
                best_score, best_snap, hist.best_epoch = score, store.snapshot(), epoch
    if best_snap is not None:
        store.restore(best_snap)
    else:
        hist.best_epoch = epochs
    return hist


def train_initial(model: NextEventModel, samples: Sequence[Sample], cfg: nn.SgdConfig,
                  validation: Sequence[Sample] | None = None) -> TrainHistory:
    """Standard next-event training on normal samples; keeps the best eval_every checkpoint."""
    X, y = pair_arrays(samples, model.h)
    if X.shape[0] == 0:
        raise ValueError("no next-event pairs: every training sample is shorter than h + 1")
    model.grow(int(max(X.max(), y.max())) + 1)
    evaluate = None
    if validation:
        Xv, yv = pair_arrays(validation, model.h)
        if Xv.shape[0]:
            model.grow(int(max(Xv.max(), yv.max())) + 1)
            evaluate = lambda: model.loss(Xv, yv)[0]  # noqa: E731
    if evaluate is None:
        evaluate = lambda: model.loss(X, y)[0]  # noqa: E731
    hist = fit_epochs(model.store, lambda idx: model.loss_and_grad(X[idx], y[idx]), X.shape[0], cfg,
                      evaluate=evaluate)
    log.info("next-event training: %d pairs, loss %.4f -> %.4f, best epoch %d", X.shape[0],
             hist.losses[0] if hist.losses else float("nan"), hist.losses[-1] if hist.losses else float("nan"),
             hist.best_epoch)
    return hist


# -- Top-K detection -------------------------------------------------------------

def top_k_ranks(logits: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """Rank of ``actual`` per row: classes scoring higher, or equal with a lower id, come first."""
    n, C = logits.shape
    actual = np.asarray(actual, dtype=np.int64)
    rows = np.arange(n)
    known = actual < C
    a = np.where(known, actual, 0)
    ref = logits[rows, a][:, None]
    ids = np.arange(C)[None, :]
    ahead = (logits > ref) | ((logits == ref) & (ids < a[:, None]))
    return np.where(known, ahead.sum(axis=1), C)


def in_top_k(scores, actual: int, k: int) -> bool:
    scores = np.asarray(scores, dtype=np.float64)[None, :]
    return bool(top_k_ranks(scores, np.array([actual]))[0] < k)


def is_window_normal(model: NextEventModel, window: Sequence[int], actual: int) -> bool:
    if actual >= model.vocab_size or max(window) >= model.vocab_size:
        return False
    return in_top_k(model.logits(np.asarray([window]))[0], actual, model.top_k)


def window_normal_mask(model: NextEventModel, windows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised Top-K test; windows touching an id outside the classifier fail."""
    V = model.vocab_size
    ok = np.ones(len(targets), dtype=bool)
    if len(targets) == 0:
        return ok
    covered = (windows.max(axis=1) < V) & (targets < V)
    if covered.any():
        ranks = top_k_ranks(model.logits(windows[covered]), targets[covered])
        ok[covered] = ranks < model.top_k
    ok[~covered] = False
    return ok


def score_samples(model: NextEventModel, samples: Sequence[Sample]) -> list[DetectionVerdict]:
    """A sample is anomalous iff any of its windows fails the Top-K test."""
    h = model.h
    X, y = pair_arrays(samples, h)
    mask = window_normal_mask(model, X, y)
    out, pos = [], 0
    for s in samples:
        n = max(0, len(s.events) - h)
        if n == 0:
            out.append(DetectionVerdict(s.origin, False, None, 0.0, tested=False))
            continue
        m = mask[pos:pos + n]
        pos += n
        bad = np.flatnonzero(~m)
        if bad.size:
            out.append(DetectionVerdict(s.origin, True, int(bad[0]), float(bad.size) / n))
        else:
            out.append(DetectionVerdict(s.origin, False, None, 0.0))
    return out


def score_sample(model: NextEventModel, sample: Sample) -> DetectionVerdict:
    return score_samples(model, [sample])[0]


def grow_classes(model: NextEventModel, new_vocab_size: int) -> None:
    if new_vocab_size < model.vocab_size:
        raise ValueError(f"cannot shrink classifier from {model.vocab_size} to {new_vocab_size}")
    model.grow(new_vocab_size)


# -- normality autoencoder -------------------------------------------------------

class NormalityModel:
    """Dense autoencoder over mean-pooled header-feature windows."""

    def __init__(self, input_dim: int, code_dim: int = 8, threshold: float = 0.02, window: int = 10, seed: int = 0):
        if not threshold > 0:
            raise ValueError("threshold must be positive")
        self.input_dim = input_dim
        self.code_dim = code_dim
        self.threshold = threshold
        self.window = window
        self.seed = seed
        rng = np.random.default_rng([seed, 1])
        self.store = nn.ParameterStore()
        self.store.add("enc.W", nn.init_uniform(rng, (input_dim, code_dim), input_dim))
        self.store.add("enc.b", nn.init_uniform(rng, (code_dim,), input_dim))
        self.store.add("dec.W", nn.init_uniform(rng, (code_dim, input_dim), code_dim))
        self.store.add("dec.b", nn.init_uniform(rng, (input_dim,), code_dim))

    def manifest(self) -> dict:
        return {"kind": "normality", "input_dim": self.input_dim, "code_dim": self.code_dim,
                "threshold": self.threshold, "window": self.window, "seed": self.seed}

    @classmethod
    def from_checkpoint(cls, store: nn.ParameterStore, manifest: dict) -> "NormalityModel":
        m = cls(manifest["input_dim"], manifest["code_dim"], manifest["threshold"], manifest["window"],
                manifest["seed"])
        m.store.restore(store.params)
        return m

    def forward(self, X: np.ndarray):
        s = self.store
        z, c1 = nn.dense_forward(X, s["enc.W"], s["enc.b"])
        a = np.tanh(z)
        out, c2 = nn.dense_forward(a, s["dec.W"], s["dec.b"])
        return out, (c1, a, c2)

    def loss_and_grad(self, X: np.ndarray) -> float:
        out, (c1, a, c2) = self.forward(X)
        loss, dout = nn.mse_loss(out, X, name="reconstruction")
        da, dW2, db2 = nn.dense_backward(dout, c2)
        dz = da * (1.0 - a * a)
        _, dW1, db1 = nn.dense_backward(dz, c1)
        s = self.store
        s.set_grad("enc.W", dW1)
        s.set_grad("enc.b", db1)
        s.set_grad("dec.W", dW2)
        s.set_grad("dec.b", db2)
        return loss

    def window_errors(self, X: np.ndarray) -> np.ndarray:
        out, _ = self.forward(X)
        return ((out - X) ** 2).mean(axis=1)

    def sample_errors(self, samples: Sequence[Sample], encoder: HeaderEncoder) -> np.ndarray:
        """Mean window reconstruction MSE per sample."""
        if not samples:
            return np.zeros(0)
        windows = [pooled_windows(header_features(s, encoder), self.window) for s in samples]
        errs = self.window_errors(np.concatenate(windows))
        bounds = np.cumsum([0] + [w.shape[0] for w in windows])
        return np.array([errs[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])


def normality_windows(samples: Sequence[Sample], encoder: HeaderEncoder, window: int = 10) -> np.ndarray:
    return np.concatenate([pooled_windows(header_features(s, encoder), window) for s in samples])


def train_normality(model: NormalityModel, windows: np.ndarray, cfg: nn.SgdConfig) -> TrainHistory:
    if windows.shape[0] == 0:
        raise ValueError("no header windows to train on")
    return fit_epochs(model.store, lambda idx: model.loss_and_grad(windows[idx]), windows.shape[0], cfg,
                      seed_offset=1, evaluate=lambda: float(model.window_errors(windows).mean()))


def normality_filter(model: NormalityModel, encoder: HeaderEncoder, batch: Sequence[Sample]) -> list[Sample]:
    """Samples whose mean window MSE is strictly below the threshold, in input order."""
    errs = model.sample_errors(batch, encoder)
    return [s for s, e in zip(batch, errs) if e < model.threshold]
