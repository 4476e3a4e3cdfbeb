"""Fully connected binary classifier 204 -> 128 -> 64 -> 32 -> 1.

Rectifier hidden units, logistic output (score = P(essential)), binary
cross-entropy loss, mini-batch SGD with hand-written backpropagation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import ContractViolation, Prediction
from ..features import LAYOUT_HASH, N_FEATURES
from .forest import TrainingError, _check_layout

logger = logging.getLogger(__name__)

LAYER_WIDTHS = (N_FEATURES, 128, 64, 32, 1)


class TrainingDiverged(TrainingError):
    pass


@dataclass
class MlpConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    # stop after this many epochs without validation improvement; None trains all epochs
    patience: Optional[int] = 10


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    widths: tuple = LAYER_WIDTHS
    layout_hash: str = LAYOUT_HASH
    profiles: dict = field(default_factory=dict)
    history: list = field(default_factory=list, compare=False)

    kind = "mlp"

    def __post_init__(self):
        widths = tuple(self.widths)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ContractViolation(f"layer {i} has shape {W.shape}/{b.shape}")
        if len(self.weights) != len(widths) - 1:
            raise ContractViolation("layer count does not match widths")

    def copy(self) -> "MlpModel":
        return MlpModel(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.widths,
            self.layout_hash,
            dict(self.profiles),
        )

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_mlp(seed: int = 0, widths: tuple = LAYER_WIDTHS) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, tuple(widths))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logits(m: MlpModel, X: np.ndarray) -> np.ndarray:
    h = X
    last = len(m.weights) - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def bce_loss(m: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    z = logits(m, X)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_gradients(m: MlpModel, X: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient for every weight and bias."""
    acts = [X]
    pre = []
    h = X
    last = len(m.weights) - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        a = h @ W + b
        pre.append(a)
        h = np.maximum(a, 0.0) if i < last else a
        acts.append(h)
    z = pre[-1][:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    delta = ((_sigmoid(z) - y) / len(y))[:, None]
    gW = [None] * len(m.weights)
    gb = [None] * len(m.biases)
    for i in range(last, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i].T) * (pre[i - 1] > 0)
    return loss, gW, gb


def train_mlp(
    X: np.ndarray,
    y: np.ndarray,
    config: Optional[MlpConfig] = None,
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> MlpModel:
    """Mini-batch SGD (with optional momentum) on binary cross-entropy.

    With a validation set the parameters from the epoch with the lowest
    validation loss are returned.
    """
    cfg = config or MlpConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ContractViolation(f"training matrix must have {N_FEATURES} columns")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise TrainingError("degenerate training set: need at least two samples of both classes")
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(cfg.seed)
    velocity = [np.zeros_like(p) for p in model.parameters()]
    use_val = X_val is not None and len(X_val) > 0
    best, best_loss, stale = model.copy(), np.inf, 0
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, gW, gb = loss_and_gradients(model, X[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} is too high"
                )
            grads = [g for pair in zip(gW, gb) for g in pair]
            for p, v, g in zip(model.parameters(), velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        train_loss = bce_loss(model, X, y)
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}; lower the learning rate")
        record = {"epoch": epoch, "train_loss": train_loss}
        if use_val:
            val_loss = bce_loss(model, np.asarray(X_val, float), np.asarray(y_val, float))
            record["val_loss"] = val_loss
            if val_loss < best_loss - 1e-12:
                best, best_loss, stale = model.copy(), val_loss, 0
            else:
                stale += 1
        model.history.append(record)
        logger.debug("epoch %d %s", epoch, record)
        if use_val and cfg.patience is not None and stale >= cfg.patience:
            break
    if use_val:
        best.history = model.history
        return best
    return model


def mlp_scores(m: MlpModel, X: np.ndarray) -> np.ndarray:
    X = _check_layout(m, X)
    return _sigmoid(logits(m, np.atleast_2d(X)))


def predict_mlp(m: MlpModel, v: np.ndarray) -> Prediction:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ContractViolation("predict_mlp takes a single vector")
    return Prediction.from_score(mlp_scores(m, v)[0])
