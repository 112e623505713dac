"""Linear solvability router: logistic scoring, SGD training, layer sweep.

The router reads one layer's last-token hidden vector h from a capability
embedding and scores P = sigmoid(w.h + b), the probability that the
general model solves the query on its own.  Training minimizes the summed
binary cross-entropy

    L = - sum_i [ y_i log p_i + (1 - y_i) log (1 - p_i) ],

with p clamped to [eps, 1-eps], eps = 1e-12, by plain mini-batch SGD
(no momentum, no weight decay) with a seeded shuffle per epoch.  Default
hyperparameters: 5 epochs, batch size 32, learning rate 1e-4.

All arithmetic here is float64; embeddings arrive as float32 and are
upcast on entry.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RunSeed, derive_rng, stable_fingerprint
from .dataset import LabeledExample
from .errors import ConfigError, DomainError, TrainingDivergedError

__all__ = [
    "CLAMP_EPS",
    "RouterModel",
    "TrainConfig",
    "TrainResult",
    "RouterMetrics",
    "SweepResult",
    "predict",
    "loss",
    "gradient",
    "train",
    "evaluate_router",
    "sweep_layers",
    "save_router",
    "load_router",
]

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class RouterModel:
    """One linear router bound to a single transformer layer.

    ``normalization``, when present, is a (mean, std) pair applied to
    inputs before scoring; it is learned at training time and saved with
    the model so deployment sees the same transform.
    """

    layer: int
    weights: np.ndarray
    bias: float
    trained_on: str = ""
    normalization: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.layer < 1:
            raise DomainError("layer index is 1-based")
        if self.weights.ndim != 1:
            raise DomainError("weights must be a vector")
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise DomainError("router parameters must be finite")
        if self.normalization is not None:
            mean, std = self.normalization
            mean = np.asarray(mean, dtype=np.float64)
            std = np.asarray(std, dtype=np.float64)
            if mean.shape != self.weights.shape or std.shape != self.weights.shape:
                raise DomainError("normalization stats must match weight dimension")
            object.__setattr__(self, "normalization", (mean, std))

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def _features(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.dim:
            raise DomainError(f"input dim {h.shape[-1]} != router dim {self.dim}")
        if self.normalization is not None:
            mean, std = self.normalization
            h = (h - mean) / std
        return h

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Raw linear scores w.h + b for a batch of already-normalized rows."""
        return features @ self.weights + self.bias


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(model: RouterModel, h: np.ndarray) -> float:
    """P(general model solves it) = sigmoid(w.h + b)."""
    features = model._features(np.asarray(h))
    if features.ndim != 1:
        raise DomainError("predict takes a single vector; use predict_batch for matrices")
    return float(_sigmoid(np.asarray([model.scores(features)]))[0])


def predict_batch(model: RouterModel, rows: np.ndarray) -> np.ndarray:
    features = model._features(np.asarray(rows))
    return _sigmoid(model.scores(features))


def _batch_arrays(
    model: RouterModel, batch: Sequence[tuple[np.ndarray, int]]
) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise DomainError("batch must be non-empty")
    X = np.stack([np.asarray(h, dtype=np.float64) for h, _ in batch])
    y = np.asarray([float(y) for _, y in batch])
    return model._features(X), y


def _nll(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss(model: RouterModel, batch: Sequence[tuple[np.ndarray, int]]) -> float:
    """Summed cross-entropy of the model over a batch of (h, y) pairs."""
    X, y = _batch_arrays(model, batch)
    return _nll(_sigmoid(model.scores(X)), y)


def gradient(
    model: RouterModel, batch: Sequence[tuple[np.ndarray, int]]
) -> tuple[np.ndarray, float]:
    """(dL/dw, dL/db) = (sum (p - y) h, sum (p - y)) over the batch."""
    X, y = _batch_arrays(model, batch)
    r = _sigmoid(model.scores(X)) - y
    return X.T @ r, float(np.sum(r))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: RunSeed = 0
    shuffle: bool = True
    standardize: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass(frozen=True)
class TrainResult:
    model: RouterModel
    loss_trace: tuple[float, ...]


def _design_matrix(
    examples: Sequence[LabeledExample], layer: int
) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack(
        [np.asarray(e.embedding.layer_vector(layer), dtype=np.float64) for e in examples]
    )
    y = np.asarray([float(e.label) for e in examples])
    return X, y


def train(
    examples: Sequence[LabeledExample], layer: int, config: TrainConfig | None = None
) -> TrainResult:
    """Fit one router on one layer by seeded mini-batch SGD from zero init.

    The loss trace holds the full-dataset loss after each epoch; a
    non-finite loss aborts with a diagnostic rather than returning junk.
    """
    config = config or TrainConfig()
    if len(examples) < 2:
        raise DomainError("training needs at least 2 examples")
    X, y = _design_matrix(examples, layer)
    classes = set(int(v) for v in y)
    if len(classes) < 2:
        logger.warning("training set is single-class (%s); router will be degenerate", classes)

    normalization = None
    if config.standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        X = (X - mean) / std
        normalization = (mean, std)

    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    rng = derive_rng(config.seed, "train-shuffle")
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            r = _sigmoid(X[idx] @ w + b) - y[idx]
            w = w - config.learning_rate * (X[idx].T @ r)
            b = b - config.learning_rate * float(np.sum(r))
        epoch_loss = _nll(_sigmoid(X @ w + b), y)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite loss after epoch {epoch + 1}")
        trace.append(epoch_loss)

    fingerprint = stable_fingerprint(
        (layer, tuple((e.query_id, int(e.label)) for e in examples))
    )
    model = RouterModel(
        layer=layer,
        weights=w,
        bias=b,
        trained_on=fingerprint,
        normalization=normalization,
    )
    return TrainResult(model=model, loss_trace=tuple(trace))


@dataclass(frozen=True)
class RouterMetrics:
    """Classification metrics at threshold 0.5; positive class = solvable."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": dict(self.confusion),
        }


def evaluate_router(
    model: RouterModel, testset: Sequence[LabeledExample]
) -> RouterMetrics:
    """Confusion-matrix metrics of thresholded predictions (P >= 0.5)."""
    if len(testset) == 0:
        raise DomainError("testset must be non-empty")
    X, y = _design_matrix(testset, model.layer)
    p = predict_batch(model, X)
    predicted = p >= 0.5
    actual = y >= 0.5
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    total = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return RouterMetrics(
        accuracy=(tp + tn) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    )


@dataclass(frozen=True)
class SweepResult:
    per_layer: dict[int, RouterMetrics]
    models: dict[int, RouterModel]
    best_layer: int


def sweep_layers(
    examples: Sequence[LabeledExample],
    train_fraction: float,
    config: TrainConfig | None = None,
) -> SweepResult:
    """Train and score one router per captured layer; pick the best by
    validation accuracy, breaking ties toward the lower (cheaper) layer.

    Layer jobs run concurrently; they share the read-only example list and
    each derives its own RNG streams, so concurrency cannot change results.
    """
    config = config or TrainConfig()
    if not 0.0 < train_fraction < 1.0:
        raise DomainError("train_fraction must be in (0,1)")
    if len(examples) < 4:
        raise DomainError("sweep needs at least 4 examples")
    index_sets = {e.embedding.layer_indices for e in examples}
    if len(index_sets) != 1:
        raise DomainError("examples carry inconsistent layer sets")
    layers = list(next(iter(index_sets)))
    if not layers:
        raise DomainError("no layers to sweep")

    n = len(examples)
    perm = derive_rng(config.seed, "sweep-split").permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train_set = [examples[i] for i in perm[:n_train]]
    val_set = [examples[i] for i in perm[n_train:]]

    def job(layer: int) -> tuple[int, RouterModel, RouterMetrics]:
        result = train(train_set, layer, config)
        return layer, result.model, evaluate_router(result.model, val_set)

    with ThreadPoolExecutor(max_workers=min(len(layers), 8)) as pool:
        outcomes = list(pool.map(job, layers))

    per_layer = {layer: metrics for layer, _, metrics in outcomes}
    models = {layer: model for layer, model, _ in outcomes}
    best_layer = min(
        per_layer, key=lambda layer: (-per_layer[layer].accuracy, layer)
    )
    return SweepResult(per_layer=per_layer, models=models, best_layer=best_layer)


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------


def save_router(path: str | Path, model: RouterModel) -> None:
    """JSON model file; float64 values round-trip exactly via repr."""
    payload: dict = {
        "layer": model.layer,
        "dim": model.dim,
        "weights": [float(v) for v in model.weights],
        "bias": float(model.bias),
        "trained_on": model.trained_on,
    }
    if model.normalization is not None:
        mean, std = model.normalization
        payload["normalization"] = {
            "mean": [float(v) for v in mean],
            "std": [float(v) for v in std],
        }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8")


def load_router(path: str | Path) -> RouterModel:
    try:
        payload = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"router model file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"router model file unreadable: {path}: {exc}") from exc
    try:
        normalization = None
        if payload.get("normalization") is not None:
            norm = payload["normalization"]
            normalization = (np.asarray(norm["mean"]), np.asarray(norm["std"]))
        model = RouterModel(
            layer=int(payload["layer"]),
            weights=np.asarray(payload["weights"], dtype=np.float64),
            bias=float(payload["bias"]),
            trained_on=str(payload.get("trained_on", "")),
            normalization=normalization,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"router model file malformed: {path}: {exc}") from exc
    if model.dim != int(payload.get("dim", model.dim)):
        raise ConfigError(f"router model file inconsistent dim: {path}")
    return model
