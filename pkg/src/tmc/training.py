"""Optimizers and the two training loops.

``train_tangent`` fits a delta for the linearized model at a frozen anchor;
the objective is convex in the delta for any convex loss.  ``train_nonlinear``
is ordinary fine-tuning of the weights, used by the non-linear baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Hashable, List, Optional, Tuple

import numpy as np

from .io.datasets import Dataset
from .losses import LossSpec, loss_grad, loss_value
from .network import BaseModel, forward, jvp_from_cache, primal_cache, vjp_from_cache
from .params import DimensionMismatch, ParamVector
from .tangent import TangentModel, head_mask

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: Tuple[Tuple[int, float], ...] = ((25, 0.1), (40, 0.1))

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        object.__setattr__(self, "schedule", tuple((int(e), float(f)) for e, f in self.schedule))
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if any(f <= 0 for _, f in self.schedule):
            raise ValueError("schedule factors must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; each milestone multiplies from that epoch on."""
        lr = self.learning_rate
        for e, f in self.schedule:
            if epoch >= e:
                lr *= f
        return lr


def adam(lr: float = 1e-3, **kw) -> OptimizerSpec:
    return OptimizerSpec("adam", lr, **kw)


def sgd(lr: float = 1e-2, momentum: float = 0.9, **kw) -> OptimizerSpec:
    return OptimizerSpec("sgd", lr, momentum=momentum, **kw)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: LossSpec = LossSpec("rsl", 1.0, 25.0)
    optimizer: OptimizerSpec = OptimizerSpec()
    init_mode: str = "anchor_zero"
    head_only: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_mode not in ("anchor_zero", "previous_composed"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


def default_tangent_config(**kw) -> TrainConfig:
    return TrainConfig(**{"loss": LossSpec("rsl", 1.0, 25.0), "optimizer": adam(1e-3), **kw})


def default_nonlinear_config(**kw) -> TrainConfig:
    return TrainConfig(**{"loss": LossSpec("cross_entropy"), "optimizer": sgd(1e-2), **kw})


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


class Optimizer:
    """Holds the parameter array and per-parameter state for one training run."""

    def __init__(self, spec: OptimizerSpec, params: np.ndarray):
        self.spec = spec
        self.params = np.array(params, dtype=np.float64)
        self.t = 0
        self.lr = spec.learning_rate
        if spec.kind == "adam":
            self.m = np.zeros_like(self.params)
            self.v = np.zeros_like(self.params)
        else:
            self.velocity = np.zeros_like(self.params)

    def step(self, grad: np.ndarray) -> np.ndarray:
        if grad.shape != self.params.shape:
            raise DimensionMismatch(f"gradient shape {grad.shape} != params {self.params.shape}")
        self.t += 1
        s = self.spec
        if s.kind == "adam":
            self.m = s.beta1 * self.m + (1 - s.beta1) * grad
            self.v = s.beta2 * self.v + (1 - s.beta2) * grad * grad
            m_hat = self.m / (1 - s.beta1 ** self.t)
            v_hat = self.v / (1 - s.beta2 ** self.t)
            self.params -= self.lr * m_hat / (np.sqrt(v_hat) + s.epsilon)
        else:
            if s.momentum:
                self.velocity = s.momentum * self.velocity + grad
                self.params -= self.lr * self.velocity
            else:
                self.params -= self.lr * grad
        return self.params


def optimizer_step(state: Optimizer, grad) -> np.ndarray:
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    return state.step(g)


def _check_task(base: BaseModel, task: Dataset):
    if len(task) == 0:
        raise ValueError("cannot train on an empty dataset")
    if task.dim != base.spec.input_dim:
        raise DimensionMismatch(f"task features have dim {task.dim}, network expects {base.spec.input_dim}")
    if task.labels.max() >= base.spec.output_dim:
        raise ValueError(f"label {task.labels.max()} out of range for {base.spec.output_dim} outputs")


def _guard(loss: float, epoch: int):
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"training diverged at epoch {epoch}: loss={loss}")


def tangent_dataset_loss(base: BaseModel, delta: ParamVector, data: Dataset, loss: LossSpec) -> float:
    cache = primal_cache(base, data.features)
    logits = cache[-1] + jvp_from_cache(base, cache, delta)
    return float(np.mean(loss_value(loss, logits, data.labels)))


def train_tangent(
    base: BaseModel,
    task: Dataset,
    cfg: TrainConfig,
    init: Optional[ParamVector] = None,
    task_id: Hashable = None,
    history: Optional[List[EpochRecord]] = None,
    grad_hook: Optional[Callable[[np.ndarray], None]] = None,
) -> TangentModel:
    """Fit a tangent delta on one task by mini-batch descent; the anchor stays frozen.

    The returned model carries a single log record under ``task_id`` so it can
    be folded into a logged composition.
    """
    _check_task(base, task)
    m = base.weights.dim
    if init is not None and init.dim != m:
        raise DimensionMismatch(f"init has dim {init.dim}, anchor has {m}")
    rng = np.random.default_rng(cfg.seed)
    mask = head_mask(base) if cfg.head_only else None

    start = np.zeros(m) if init is None else init.numpy()
    if mask is not None:
        start[~mask] = 0.0
    opt = Optimizer(cfg.optimizer, start)
    n, bs = len(task), cfg.batch_size
    # primal activations at the anchor never change; compute them once
    cache = primal_cache(base, task.features)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.optimizer.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            bcache = [c[idx] for c in cache]
            delta = ParamVector._wrap(opt.params.copy())
            logits = bcache[-1] + jvp_from_cache(base, bcache, delta)
            y = task.labels[idx]
            total += float(np.sum(loss_value(cfg.loss, logits, y)))
            g = vjp_from_cache(base, bcache, loss_grad(cfg.loss, logits, y) / idx.size).numpy()
            if mask is not None:
                g[~mask] = 0.0
            if grad_hook is not None:
                grad_hook(g)
            optimizer_step(opt, g)
        mean = total / n
        _guard(mean, epoch)
        if history is not None:
            history.append(EpochRecord(epoch, mean, opt.lr))
        log.debug("tangent epoch %d loss %.6g lr %.3g", epoch, mean, opt.lr)

    return TangentModel.component(base, ParamVector(opt.params), task_id)


def nonlinear_dataset_loss(model: BaseModel, data: Dataset, loss: LossSpec) -> float:
    return float(np.mean(loss_value(loss, forward(model, data.features), data.labels)))


def train_nonlinear(
    base: BaseModel,
    task: Dataset,
    cfg: TrainConfig,
    history: Optional[List[EpochRecord]] = None,
) -> BaseModel:
    """Fine-tune all weights; returns a new model and leaves ``base`` untouched."""
    _check_task(base, task)
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(cfg.optimizer, base.weights.values)
    mask = head_mask(base) if cfg.head_only else None
    n, bs = len(task), cfg.batch_size
    spec = base.spec

    for epoch in range(cfg.epochs):
        opt.lr = cfg.optimizer.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            current = BaseModel(spec, ParamVector._wrap(opt.params.copy()))
            bcache = primal_cache(current, task.features[idx])
            y = task.labels[idx]
            logits = bcache[-1]
            total += float(np.sum(loss_value(cfg.loss, logits, y)))
            g = vjp_from_cache(current, bcache, loss_grad(cfg.loss, logits, y) / idx.size).numpy()
            if mask is not None:
                g[~mask] = 0.0
            optimizer_step(opt, g)
        mean = total / n
        _guard(mean, epoch)
        if history is not None:
            history.append(EpochRecord(epoch, mean, opt.lr))
        log.debug("nonlinear epoch %d loss %.6g lr %.3g", epoch, mean, opt.lr)

    return BaseModel(spec, ParamVector(opt.params))
