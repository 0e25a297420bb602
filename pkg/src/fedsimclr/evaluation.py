"""Linear-probe evaluation on frozen encoder representations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, Dataset
from .model import ModelParams, forward_encoder
from .numerics import ConfigurationError, log_softmax

LP_MODES = ("full_labels", "labelled_subset")


@dataclass
class LinearProbe:
    weight: np.ndarray          # (num_classes, z_dim)
    bias: np.ndarray
    version: int = 0

    @classmethod
    def zeros(cls, num_classes: int, z_dim: int) -> "LinearProbe":
        return cls(np.zeros((num_classes, z_dim)), np.zeros(num_classes))

    def logits(self, reps: np.ndarray) -> np.ndarray:
        return reps @ self.weight.T + self.bias

    def loss(self, reps: np.ndarray, labels: np.ndarray) -> float:
        lsm = log_softmax(self.logits(reps), axis=1)
        return -float(np.mean(lsm[np.arange(labels.size), labels]))


def extract_representations(params: ModelParams, x) -> np.ndarray:
    """Encoder output for un-augmented inputs."""
    return forward_encoder(params, np.asarray(x, dtype=np.float64)).z


def train_probe(probe: LinearProbe, reps, labels, epochs: int = 20, lr: float = 0.1) -> LinearProbe:
    """Full-batch softmax-regression descent starting from ``probe``'s parameters."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(reps)):
        raise FloatingPointError("non-finite representations")
    c = probe.weight.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigurationError(f"labels outside [0, {c})")
    w, b = probe.weight.copy(), probe.bias.copy()
    n = labels.size
    if n:
        onehot = np.eye(c)[labels]
        for _ in range(epochs):
            p = np.exp(log_softmax(reps @ w.T + b, axis=1))
            g = (p - onehot) / n
            w -= lr * (g.T @ reps)
            b -= lr * g.sum(axis=0)
    return LinearProbe(w, b, probe.version + 1)


def accuracy(probe: LinearProbe, reps, labels) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    pred = np.argmax(probe.logits(np.asarray(reps, dtype=np.float64)), axis=1)
    return float(np.mean(pred == labels))


def probe_training_set(clients: list[ClientDataset], mode: str, source: Dataset | None = None):
    """Pooled client features and labels for the probe.

    ``full_labels`` uses every client sample; ``labelled_subset`` only the
    samples whose labels were visible during training. With ``source`` (the
    parent dataset) the probe sees the original, unrotated features, which
    matches the unrotated test set under covariate shift.
    """
    if mode not in LP_MODES:
        raise ConfigurationError(f"unknown lp_mode {mode!r}")
    xs, ys = [], []
    for c in clients:
        sel = slice(None) if mode == "full_labels" else c.labelled_mask
        xs.append((c.x if source is None else source.x[c.indices])[sel])
        ys.append(c.y[sel])
    return np.concatenate(xs), np.concatenate(ys)


class ProbeEvaluator:
    """Stateful evaluation hook; the probe is warm-started across calls."""

    def __init__(self, clients: list[ClientDataset], test: Dataset, z_dim: int, mode: str,
                 epochs: int = 20, lr: float = 0.1, source: Dataset | None = None):
        self.train_x, self.train_y = probe_training_set(clients, mode, source)
        self.test = test
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.probe = LinearProbe.zeros(test.num_classes, z_dim)

    def __call__(self, params: ModelParams) -> tuple[float, float]:
        reps = extract_representations(params, self.train_x)
        self.probe = train_probe(self.probe, reps, self.train_y, self.epochs, self.lr)
        train_acc = accuracy(self.probe, reps, self.train_y)
        test_acc = accuracy(self.probe, extract_representations(params, self.test.x), self.test.y)
        return train_acc, test_acc
