"""Losses on logits: cross-entropy, MSE and the rescaled square loss (RSL).

All functions accept a single logit vector with an integer label, or a batch
``(n, K)`` with a label array; batched values are per-sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("cross_entropy", "mse", "rsl")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "rsl"
    alpha: float = 1.0
    beta: float = 25.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"rsl alpha and beta must be positive, got alpha={self.alpha}, beta={self.beta}")


def _prep(logits, y):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (z.shape[0],):
        raise ValueError(f"got {y.shape[0]} labels for {z.shape[0]} logit rows")
    K = z.shape[1]
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"label out of range for {K} classes")
    return z, y, single


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_value(spec: LossSpec, logits, y):
    z, y, single = _prep(logits, y)
    rows = np.arange(z.shape[0])
    if spec.kind == "cross_entropy":
        out = -log_softmax(z)[rows, y]
    elif spec.kind == "mse":
        onehot = np.zeros_like(z)
        onehot[rows, y] = 1.0
        out = np.mean((z - onehot) ** 2, axis=1)
    else:
        resid = z.copy()
        resid[rows, y] -= spec.beta
        sq = resid ** 2
        sq[rows, y] *= spec.alpha
        out = sq.sum(axis=1) / z.shape[1]
    return float(out[0]) if single else out


def loss_grad(spec: LossSpec, logits, y) -> np.ndarray:
    z, y, single = _prep(logits, y)
    rows = np.arange(z.shape[0])
    if spec.kind == "cross_entropy":
        g = softmax(z)
        g[rows, y] -= 1.0
    else:
        alpha, beta = (1.0, 1.0) if spec.kind == "mse" else (spec.alpha, spec.beta)
        K = z.shape[1]
        g = (2.0 / K) * z
        g[rows, y] = (2.0 * alpha / K) * (z[rows, y] - beta)
    return g[0] if single else g


def mean_loss(spec: LossSpec, logits, y) -> float:
    return float(np.mean(loss_value(spec, np.atleast_2d(logits), y)))
