"""Small numpy neural core: dense, LSTM cell, embedding, losses and SGD.

Every op is a pair of functions, ``*_forward`` returning ``(output, cache)``
and ``*_backward`` consuming the cache. Everything runs in float64 so the
finite-difference checks in :func:`gradient_check` are meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when a loss or update produces NaN/inf; carries the tensor name."""

    def __init__(self, name: str, message: str = "non-finite values"):
        super().__init__(f"{name}: {message}")
        self.name = name


@dataclass
class SgdConfig:
    learning_rate: float = 1e-5
    epochs: int = 100
    eval_every: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, eval_every >= 1 and batch_size >= 1 required")


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class ParameterStore:
    """Named parameter tensors with gradients of matching shape."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def replace(self, name: str, value: np.ndarray) -> None:
        """Swap in a tensor of a new shape (used when a layer grows)."""
        if name not in self.params:
            raise KeyError(name)
        self.add(name, value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def set_grad(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != parameter shape {self.params[name].shape}")
        self.grads[name][...] = grad

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.params = {}
        self.grads = {}
        for k, v in snap.items():
            self.add(k, v.copy())

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        other.restore(self.params)
        return other

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(name)


def _check_shape(name: str, actual, expected) -> None:
    if tuple(actual) != tuple(expected):
        raise ShapeError(f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- dense -------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x @ W + b with W of shape (in, out)."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    _check_shape("dense.b", b.shape, (W.shape[1],))
    return x @ W + b, (x, W)


def dense_backward(dy: np.ndarray, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ W.T
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dW, db


# -- LSTM cell ---------------------------------------------------------------

def lstm_cell_forward(x, h_prev, c_prev, Wx, Wh, b):
    """One LSTM step. Gate layout along the last axis is (input, forget, cell, output)."""
    H = h_prev.shape[-1]
    _check_shape("lstm.Wx", Wx.shape, (x.shape[-1], 4 * H))
    _check_shape("lstm.Wh", Wh.shape, (H, 4 * H))
    z = x @ Wx + h_prev @ Wh + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (x, h_prev, c_prev, Wx, Wh, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache):
    x, h_prev, c_prev, Wx, Wh, i, f, g, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    dg = dct * i
    df = dct * c_prev
    dc_prev = dct * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
        axis=1,
    )
    dx = dz @ Wx.T
    dh_prev = dz @ Wh.T
    dWx = x.T @ dz
    dWh = h_prev.T @ dz
    db = dz.sum(axis=0)
    return dx, dh_prev, dc_prev, dWx, dWh, db


# -- embedding ---------------------------------------------------------------

def embedding_forward(ids: np.ndarray, E: np.ndarray):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise ShapeError(f"embedding: id out of range [0, {E.shape[0]})")
    return E[ids], (ids, E.shape)


def embedding_backward(drows: np.ndarray, cache):
    ids, shape = cache
    dE = np.zeros(shape, dtype=DTYPE)
    np.add.at(dE, ids.reshape(-1), drows.reshape(-1, shape[1]))
    return dE


# -- losses ------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, name: str = "loss"):
    """Mean cross-entropy over rows; returns (loss, dlogits)."""
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"{name}: targets shape {targets.shape} != ({n},)")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    check_finite(name, loss)
    d = np.exp(logp)
    d[rows, targets] -= 1.0
    return float(loss), d / n


def softmax_mse(logits: np.ndarray, targets: np.ndarray, name: str = "loss"):
    """Mean over rows of the squared error between softmax output and one-hot target."""
    n, C = logits.shape
    p = softmax(logits)
    y = np.zeros_like(p)
    y[np.arange(n), targets] = 1.0
    diff = p - y
    loss = (diff * diff).sum(axis=1).mean()
    check_finite(name, loss)
    gp = 2.0 * diff / n
    dlogits = p * (gp - (gp * p).sum(axis=1, keepdims=True))
    return float(loss), dlogits


def mse_loss(pred: np.ndarray, target: np.ndarray, name: str = "loss"):
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    check_finite(name, loss)
    return loss, 2.0 * diff / diff.size


def sgd_step(store: ParameterStore, lr: float) -> None:
    """theta <- theta - lr * grad, in place."""
    if lr == 0:
        return
    for name, p in store.params.items():
        g = store.grads[name]
        check_finite(name + ".grad", g)
        p -= lr * g


# -- verification ------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def __str__(self):
        lines = [f"gradient check (tol={self.tolerance:g}): {'PASS' if self.ok else 'FAIL'}"]
        for p in self.params:
            lines.append(f"  {p.name:<20} rel={p.max_rel_error:.3e} checked={p.checked} skipped={p.skipped}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    loss_fn: Callable[[], float],
    store: ParameterStore,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    names=None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` must compute the loss from ``store.params`` and write the
    analytic gradients into ``store.grads``. Elements whose analytic and
    numeric gradients are both exactly zero (e.g. embedding rows not touched
    by the batch) are skipped. Failures are reported, never raised.
    """
    loss_fn()
    analytic = {k: v.copy() for k, v in store.grads.items()}
    report = GradCheckReport(tolerance)
    for name in names or store.names():
        p = store.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        worst, checked, skipped = 0.0, 0, 0
        a_flat = analytic[name].reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + step
            fp = loss_fn()
            flat[j] = old - step
            fm = loss_fn()
            flat[j] = old
            num = (fp - fm) / (2 * step)
            if a_flat[j] == 0.0 and num == 0.0:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, float(relative_error(a_flat[j], num)))
        report.params.append(ParamCheck(name, worst, checked, skipped, worst < tolerance))
    loss_fn()
    return report


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, store: ParameterStore, manifest: dict) -> Path:
    """Write ``tensors.bin`` (raw little-endian float64) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "tensors.bin", "wb") as fh:
        for name, value in store.params.items():
            data = np.ascontiguousarray(value, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(data.size)})
            offset += data.size * 8
    doc = dict(manifest)
    doc["tensors"] = entries
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ParameterStore, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    raw = (directory / "tensors.bin").read_bytes()
    store = ParameterStore()
    for entry in doc.pop("tensors"):
        arr = np.frombuffer(raw, dtype="<f8", count=entry["count"], offset=entry["offset"])
        store.add(entry["name"], arr.reshape(entry["shape"]).astype(DTYPE))
    return store, doc
