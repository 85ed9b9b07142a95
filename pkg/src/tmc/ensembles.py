"""Composition baselines (weight soup, logit and softmax ensembles) and accuracy evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .io.datasets import Dataset
from .losses import softmax
from .network import BaseModel, forward
from .params import linear_combine
from .tangent import TangentModel, check_same_anchor, tangent_forward

Member = Union[BaseModel, TangentModel]


@dataclass(frozen=True)
class ModelCollection:
    kind: str
    members: tuple
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.kind not in ("nonlinear", "tangent"):
            raise ValueError(f"unknown collection kind {self.kind!r}")
        if not self.members:
            raise ValueError("a collection needs at least one member")
        if len(self.weights) != len(self.members):
            raise ValueError(f"{len(self.members)} members but {len(self.weights)} weights")
        expected = TangentModel if self.kind == "tangent" else BaseModel
        if not all(isinstance(m, expected) for m in self.members):
            raise TypeError(f"{self.kind} collection members must be {expected.__name__}")
        specs = {_spec(m) for m in self.members}
        if len(specs) > 1:
            raise ValueError("collection members must share one network spec")
        if self.kind == "tangent":
            check_same_anchor(*self.members)

    @classmethod
    def uniform(cls, members: Sequence[Member]) -> "ModelCollection":
        kind = "tangent" if isinstance(members[0], TangentModel) else "nonlinear"
        return cls(kind, tuple(members), (1.0 / len(members),) * len(members))

    def is_convex(self, tol: float = 1e-9) -> bool:
        w = np.asarray(self.weights)
        return bool(np.all(w >= 0) and abs(w.sum() - 1.0) <= tol)


def _spec(m: Member):
    return m.base.spec if isinstance(m, TangentModel) else m.spec


def member_logits(m: Member, x) -> np.ndarray:
    return tangent_forward(m, x) if isinstance(m, TangentModel) else forward(m, x)


def soup(members: Sequence[BaseModel], weights: Optional[Sequence[float]] = None) -> BaseModel:
    """Weight-space average of non-linear models."""
    if not members:
        raise ValueError("soup needs at least one member")
    spec = members[0].spec
    if any(m.spec != spec for m in members):
        raise ValueError("soup members must share one network spec")
    if weights is None:
        weights = [1.0 / len(members)] * len(members)
    return BaseModel(spec, linear_combine([m.weights for m in members], weights))


def ensemble_logits(collection: ModelCollection, x) -> np.ndarray:
    out = None
    for m, w in zip(collection.members, collection.weights):
        z = w * member_logits(m, x)
        out = z if out is None else out + z
    return out


def ensemble_softmax(collection: ModelCollection, x) -> np.ndarray:
    if not collection.is_convex():
        raise ValueError("softmax ensembling needs convex weights")
    out = None
    for m, w in zip(collection.members, collection.weights):
        p = w * softmax(member_logits(m, x))
        out = p if out is None else out + p
    return out


Predictor = Callable[[np.ndarray], np.ndarray]


def as_predictor(obj, mode: str = "logits") -> Predictor:
    """Wrap a model or collection as ``features -> scores``."""
    if callable(obj) and not isinstance(obj, (BaseModel, TangentModel, ModelCollection)):
        return obj
    if isinstance(obj, ModelCollection):
        if mode == "softmax":
            return lambda x: ensemble_softmax(obj, x)
        return lambda x: ensemble_logits(obj, x)
    return lambda x: member_logits(obj, x)


def predict(predictor, x, task_restriction: Optional[Sequence[int]] = None) -> np.ndarray:
    """Arg-max class per row, optionally over a subset of classes; ties go to the lowest index."""
    scores = np.atleast_2d(as_predictor(predictor)(x))
    if task_restriction is not None:
        allowed = np.asarray(sorted(set(int(c) for c in task_restriction)))
        if allowed.size == 0:
            raise ValueError("task restriction must be non-empty")
        return allowed[np.argmax(scores[:, allowed], axis=1)]
    return np.argmax(scores, axis=1)


def evaluate(predictor, dataset: Dataset, task_restriction: Optional[Sequence[int]] = None) -> float:
    """Top-1 accuracy of ``predictor`` on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if task_restriction is not None and len(task_restriction) == 0:
        raise ValueError("task restriction must be non-empty")
    pred = predict(predictor, dataset.features, task_restriction)
    return float(np.mean(pred == dataset.labels))
