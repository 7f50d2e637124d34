"""Fully-connected regressor from a projection to the 11 next-view detectabilities.

Trained by mini-batch SGD (with momentum) on per-output standardized targets.
Everything is float64 and single-threaded at the Python level so a fixed seed
reproduces the weights bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .projector import Projection, log_normalize

FEATURE_SIDE = 64
DEFAULT_SIZES = (FEATURE_SIDE * FEATURE_SIDE, 256, 64, 11)

MODEL_MAGIC = b"TRJMODEL"
MODEL_VERSION = 1


class SurrogateError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RegressorModel:
    sizes: tuple
    weights: list  # W[l] has shape (sizes[l+1], sizes[l])
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise SurrogateError("layer count does not match sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l + 1], self.sizes[l]) or b.shape != (self.sizes[l + 1],):
                raise SurrogateError(f"layer {l} has inconsistent shapes")

    @classmethod
    def init(cls, sizes=DEFAULT_SIZES, seed: int = 0) -> "RegressorModel":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
            bs.append(np.zeros(n_out))
        return cls(
            tuple(sizes), ws, bs,
            np.zeros(sizes[0]), np.ones(sizes[0]), np.zeros(sizes[-1]), np.ones(sizes[-1]),
        )

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "RegressorModel":
        return RegressorModel(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.in_mean.copy(), self.in_std.copy(), self.out_mean.copy(), self.out_std.copy(),
        )


# ---------------------------------------------------------------------------
# features


def block_mean(image, side: int = FEATURE_SIDE) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    r, c = img.shape
    if r % side or c % side:
        raise SurrogateError(f"detector {r}x{c} is not a multiple of {side}")
    br, bc = r // side, c // side
    return img.reshape(side, br, side, bc).mean(axis=(1, 3))


def featurize(counts, i0: float, model: RegressorModel | None = None) -> np.ndarray:
    """Block-averaged, log-normalized projection; standardized with the model's statistics."""
    if isinstance(counts, Projection):
        if counts.noisy_counts is None:
            raise SurrogateError("projection carries no counts")
        counts = counts.noisy_counts
    if counts is None:
        raise SurrogateError("counts are required")
    x = log_normalize(block_mean(counts), i0).ravel()
    if model is not None:
        x = (x - model.in_mean) / model.in_std
    return x


# ---------------------------------------------------------------------------
# forward / backward


def _forward(model: RegressorModel, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def predict_standardized(model: RegressorModel, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != model.sizes[0]:
        raise SurrogateError(f"expected {model.sizes[0]} features, got {x.shape[1]}")
    return _forward(model, x)[0][-1]


def predict(model: RegressorModel, features) -> np.ndarray:
    """(n, 11) detectabilities in d2 units, clamped at zero."""
    z = predict_standardized(model, features)
    return np.maximum(z * model.out_std + model.out_mean, 0.0)


def loss_and_grads(model: RegressorModel, x, t, scale: float = 1.0):
    """Mean squared error on standardized targets and its parameter gradients."""
    acts, pre = _forward(model, x)
    diff = acts[-1] - t
    loss = scale * float(np.mean(diff * diff))
    delta = scale * 2.0 * diff / diff.size
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (pre[l - 1] > 0)
    return loss, gw, gb


def dataset_loss(model: RegressorModel, x, t, batch: int = 2048) -> float:
    total = 0.0
    for s in range(0, x.shape[0], batch):
        d = predict_standardized(model, x[s : s + batch]) - t[s : s + batch]
        total += float(np.sum(d * d))
    return total / t.size


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    validation_fraction: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.97  # per-epoch multiplicative decay
    sizes: tuple = DEFAULT_SIZES

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise SurrogateError("learning rate must be positive")
        if self.batch_size < 1:
            raise SurrogateError("batch size must be >= 1")
        if self.epochs < 1:
            raise SurrogateError("epochs must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise SurrogateError("validation fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    model: RegressorModel
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)


def _stats(a: np.ndarray, floor: float):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > floor, std, 1.0)


def train(features, targets, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit the regressor; ``features`` are raw (unstandardized) featurize outputs."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise SurrogateError("empty corpus")
    if y.shape != (x.shape[0], cfg.sizes[-1]) or x.shape[1] != cfg.sizes[0]:
        raise SurrogateError("feature/target shapes do not match the architecture")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(x.shape[0])
    n_val = int(round(cfg.validation_fraction * x.shape[0]))
    if n_val >= x.shape[0]:
        n_val = 0
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])

    model = RegressorModel.init(cfg.sizes, cfg.seed)
    model.in_mean, model.in_std = _stats(x[tr_idx], 1e-6)
    model.out_mean, model.out_std = _stats(y[tr_idx], 1e-12)
    xs = (x - model.in_mean) / model.in_std
    ts = (y - model.out_mean) / model.out_std
    xtr, ttr = xs[tr_idx], ts[tr_idx]

    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    result = TrainResult(model)
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        perm = rng.permutation(xtr.shape[0])
        for s in range(0, perm.size, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss, gw, gb = loss_and_grads(model, xtr[idx], ttr[idx])
            if not np.isfinite(loss) or loss > 1e6:
                raise TrainingDiverged(f"epoch {epoch}: minibatch loss {loss:.3g}; lower the learning rate")
            for l in range(len(model.weights)):
                vel_w[l] = cfg.momentum * vel_w[l] - lr * gw[l]
                vel_b[l] = cfg.momentum * vel_b[l] - lr * gb[l]
                model.weights[l] += vel_w[l]
                model.biases[l] += vel_b[l]
        tl = dataset_loss(model, xtr, ttr)
        if not np.isfinite(tl) or tl > 1e6:
            raise TrainingDiverged(f"epoch {epoch}: training loss {tl:.3g}; lower the learning rate")
        result.train_loss.append(tl)
        if n_val:
            result.val_loss.append(dataset_loss(model, xs[val_idx], ts[val_idx]))
        lr *= cfg.lr_decay
    return result


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(model: RegressorModel, x, t, n_params: int = 100, h: float = 1e-4, seed: int = 0, scale=1.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` and ``t`` are standardized. The relative error floor is tied to the
    largest analytic gradient entry so the measure is invariant to loss scaling.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.atleast_2d(np.asarray(t, dtype=float))
    _, gw, gb = loss_and_grads(model, x, t, scale)
    params = []
    for l in range(len(model.weights)):
        params.append((model.weights[l], gw[l]))
        params.append((model.biases[l], gb[l]))
    sizes = np.array([p.size for p, _ in params])
    gmax = max(float(np.abs(g).max()) for _, g in params)
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        local = flat - (bounds[k - 1] if k else 0)
        arr, grad = params[k]
        idx = np.unravel_index(local, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        lp = loss_and_grads(model, x, t, scale)[0]
        arr[idx] = orig - h
        lm = loss_and_grads(model, x, t, scale)[0]
        arr[idx] = orig
        num = (lp - lm) / (2 * h)
        ana = grad[idx]
        denom = max(abs(ana) + abs(num), 1e-8 * gmax)
        if denom > 0:
            worst = max(worst, abs(ana - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# model file: magic, version, n_sizes, sizes, then per layer W (row-major) and b,
# then in_mean, in_std, out_mean, out_std; all floats little-endian float64


def save_model(model: RegressorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(model.sizes)))
        fh.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        for a in (model.in_mean, model.in_std, model.out_mean, model.out_std):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> RegressorModel:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise SurrogateError(f"{path}: not a model file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise SurrogateError(f"{path}: unsupported model version {version}")
    off = 16
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n

    def take(count, shape=None):
        nonlocal off
        a = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return a.reshape(shape) if shape else a

    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(take(n_in * n_out, (n_out, n_in)))
        bs.append(take(n_out))
    stats = [take(sizes[0]), take(sizes[0]), take(sizes[-1]), take(sizes[-1])]
    if off != len(data):
        raise SurrogateError(f"{path}: trailing bytes in model file")
    return RegressorModel(tuple(sizes), ws, bs, *stats)
