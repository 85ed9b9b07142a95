"""Tangent models and their composition algebra.

A tangent model is the first-order expansion of a frozen base network,
``h(x) = f(x) + J(x) @ delta``.  Because ``h`` is linear in ``delta``, weighted
sums of tangent models sharing one anchor are again tangent models, which is
what makes composition, ensembling at single-model cost, and unlearning by
subtraction possible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Hashable, Optional, Sequence, Tuple

import numpy as np

from .network import BaseModel, jvp_forward
from .params import DimensionMismatch, ParamVector, axpy, linear_combine, scale


class AnchorMismatch(ValueError):
    """Raised when combining tangent models expanded around different base weights."""


class UnlearnError(KeyError):
    pass


@dataclass(frozen=True)
class ComponentRecord:
    task_id: Hashable
    coefficient: float
    delta: ParamVector


@dataclass(frozen=True, eq=False)
class TangentModel:
    base: BaseModel
    delta: ParamVector
    task_count: int = 0
    # None disables unlearning support and keeps memory at one delta.
    component_log: Optional[Tuple[ComponentRecord, ...]] = None

    def __post_init__(self):
        if self.delta.dim != self.base.weights.dim:
            raise DimensionMismatch(
                f"delta has dim {self.delta.dim}, anchor has {self.base.weights.dim}"
            )
        if self.task_count < 0:
            raise ValueError("task_count must be nonnegative")
        if self.component_log is not None:
            object.__setattr__(self, "component_log", tuple(self.component_log))

    @classmethod
    def at_anchor(cls, base: BaseModel, keep_log: bool = False) -> "TangentModel":
        """The pre-trained model itself: zero delta, no tasks folded in."""
        return cls(base, ParamVector.zeros(base.weights.dim), 0, () if keep_log else None)

    @classmethod
    def component(cls, base: BaseModel, delta: ParamVector, task_id: Hashable = None) -> "TangentModel":
        """A model trained on a single task, carrying its own log record."""
        return cls(base, delta, 1, (ComponentRecord(task_id, 1.0, delta),))

    @property
    def logged(self) -> bool:
        return self.component_log is not None

    def task_ids(self) -> list:
        if self.component_log is None:
            return []
        return [r.task_id for r in self.component_log]

    def without_log(self) -> "TangentModel":
        return replace(self, component_log=None)

    def reconstruct_delta(self) -> ParamVector:
        if not self.component_log:
            return ParamVector.zeros(self.delta.dim)
        return linear_combine([r.delta for r in self.component_log],
                              [r.coefficient for r in self.component_log])


@dataclass(frozen=True)
class CompositionWeights:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("composition weights must be finite")
        if self.lambda1 + self.lambda2 == 0:
            raise ValueError("composition weights must not sum to zero")

    @classmethod
    def default(cls, t: int) -> "CompositionWeights":
        """Uniform-average schedule at step ``t``: new component 1/t, running model (t-1)/t."""
        if t < 1:
            raise ValueError(f"schedule step must be >= 1, got {t}")
        return cls(1.0 / t, (t - 1) / t)


def check_same_anchor(*models: TangentModel) -> None:
    prints = {m.base.fingerprint for m in models}
    if len(prints) > 1:
        raise AnchorMismatch("tangent models are expanded around different base weights")


def tangent_forward(tm: TangentModel, x) -> np.ndarray:
    primal, tangent = jvp_forward(tm.base, tm.delta, x)
    return primal + tangent


def compose_pair(
    prev: TangentModel,
    new_component: TangentModel,
    weights: Optional[CompositionWeights] = None,
    task_id: Hashable = None,
) -> TangentModel:
    """Fold ``new_component`` into the running composition ``prev``.

    With the default schedule the result is the uniform average of every
    component folded in so far, while only two deltas are ever held.
    """
    check_same_anchor(prev, new_component)
    n_new = max(new_component.task_count, 1)
    if weights is None:
        if n_new == 1:
            weights = CompositionWeights.default(prev.task_count + 1)
        else:
            weights = CompositionWeights(n_new, prev.task_count)
    total = weights.lambda1 + weights.lambda2
    a, b = weights.lambda1 / total, weights.lambda2 / total
    delta = axpy(a, new_component.delta, scale(prev.delta, b))

    log = None
    if prev.component_log is not None:
        if new_component.component_log:
            incoming = new_component.component_log
        else:
            incoming = (ComponentRecord(task_id, 1.0, new_component.delta),)
        if task_id is not None and len(incoming) == 1:
            incoming = (replace(incoming[0], task_id=task_id),)
        known = set(prev.task_ids())
        for r in incoming:
            if r.task_id in known:
                raise ValueError(f"task id {r.task_id!r} is already part of the composition")
        log = tuple(replace(r, coefficient=r.coefficient * b) for r in prev.component_log)
        log += tuple(replace(r, coefficient=r.coefficient * a) for r in incoming)
    return TangentModel(prev.base, delta, prev.task_count + n_new, log)


def compose_many(components: Sequence[TangentModel], weights: Optional[Sequence[float]] = None) -> TangentModel:
    """Single tangent model whose delta is ``sum(w_i * delta_i)``.

    Its logits equal ``sum(w_i * h_i(x)) - (sum(w_i) - 1) * f(x)``; for convex
    weights that is exactly the logit ensemble of the components.
    """
    if len(components) == 0:
        raise ValueError("cannot compose an empty list of tangent models")
    check_same_anchor(*components)
    if weights is None:
        weights = [1.0 / len(components)] * len(components)
    if len(weights) != len(components):
        raise ValueError(f"{len(components)} components but {len(weights)} weights")
    delta = linear_combine([c.delta for c in components], weights)

    log = None
    if all(c.component_log is not None for c in components):
        log = tuple(
            replace(r, coefficient=r.coefficient * float(w))
            for c, w in zip(components, weights)
            for r in c.component_log
        )
        ids = [r.task_id for r in log]
        if len(set(ids)) != len(ids):
            log = None
    count = sum(c.task_count for c in components)
    return TangentModel(components[0].base, delta, count, log)


def unlearn(composed: TangentModel, task_id: Hashable, rescale: bool = True) -> TangentModel:
    """Remove one component from a composition by subtracting its contribution.

    The subtracted amount is the component's effective coefficient (its
    schedule weight times every later running-model weight).  With ``rescale``
    the remaining coefficients are renormalized to their original total, so a
    uniform composition of T tasks becomes the uniform composition of the other
    T - 1.  Touches no data.
    """
    if composed.component_log is None:
        raise UnlearnError("composition was built without a component log; unlearning is unavailable")
    idx = [i for i, r in enumerate(composed.component_log) if r.task_id == task_id]
    if not idx:
        raise UnlearnError(f"task {task_id!r} is not part of this composition")
    rec = composed.component_log[idx[0]]
    rest = composed.component_log[:idx[0]] + composed.component_log[idx[0] + 1:]

    delta = axpy(-rec.coefficient, rec.delta, composed.delta)
    if rescale:
        if not rest:
            delta = ParamVector.zeros(delta.dim)
        else:
            total = sum(r.coefficient for r in composed.component_log)
            remaining = total - rec.coefficient
            if remaining == 0:
                raise ValueError("cannot rescale: remaining coefficients sum to zero")
            factor = total / remaining
            delta = scale(delta, factor)
            rest = tuple(replace(r, coefficient=r.coefficient * factor) for r in rest)
    return TangentModel(composed.base, delta, max(composed.task_count - 1, 0), rest)


def head_mask(base: BaseModel) -> np.ndarray:
    mask = np.zeros(base.weights.dim, dtype=bool)
    mask[base.spec.head_slice()] = True
    return mask


def project_to_head(base: BaseModel, v: ParamVector) -> ParamVector:
    out = np.zeros(v.dim)
    sl = base.spec.head_slice()
    out[sl] = v.values[sl]
    return ParamVector(out)


def restrict_to_head(tm: TangentModel) -> TangentModel:
    """Zero every delta entry outside the final dense layer."""
    log = tm.component_log
    if log is not None:
        log = tuple(replace(r, delta=project_to_head(tm.base, r.delta)) for r in log)
    return TangentModel(tm.base, project_to_head(tm.base, tm.delta), tm.task_count, log)
