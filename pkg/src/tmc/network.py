"""Dense ReLU networks with plain, forward-mode (JVP) and reverse-mode (VJP) evaluation.

Parameters live in one flat vector laid out layer by layer; each dense layer
contributes its weight matrix (shape ``(out, in)``, row-major) followed by its
bias.  Every evaluation accepts a single feature vector ``(d,)`` or a batch
``(n, d)`` and returns outputs of matching rank.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .params import DimensionMismatch, ParamVector


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    kind: str = field(default="dense", init=False)

    def __post_init__(self):
        object.__setattr__(self, "in_dim", int(self.in_dim))
        object.__setattr__(self, "out_dim", int(self.out_dim))
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"dense layer dims must be positive, got {self.in_dim}->{self.out_dim}")

    @property
    def param_count(self) -> int:
        return self.out_dim * (self.in_dim + 1)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)
    param_count: int = field(default=0, init=False)


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.01
    kind: str = field(default="leaky_relu", init=False)
    param_count: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")
        object.__setattr__(self, "slope", float(self.slope))


Layer = Union[Dense, ReLU, LeakyReLU]


def layer_from_dict(d: dict) -> Layer:
    kind = d.get("kind")
    if kind == "dense":
        return Dense(int(d["in_dim"]), int(d["out_dim"]))
    if kind == "relu":
        return ReLU()
    if kind == "leaky_relu":
        return LeakyReLU(float(d["slope"]))
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "in_dim": layer.in_dim, "out_dim": layer.out_dim}
    if isinstance(layer, LeakyReLU):
        return {"kind": "leaky_relu", "slope": layer.slope}
    return {"kind": "relu"}


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dense = [l for l in self.layers if isinstance(l, Dense)]
        if not dense:
            raise ValueError("network needs at least one dense layer")
        if not isinstance(self.layers[-1], Dense):
            raise ValueError("final layer must be the dense classification head")
        for a, b in zip(dense[:-1], dense[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.dense_layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dense_layers(self) -> List[Dense]:
        return [l for l in self.layers if isinstance(l, Dense)]

    @cached_property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    @cached_property
    def offsets(self) -> List[int]:
        """Start offset of each layer's block in the flat parameter vector."""
        out, pos = [], 0
        for l in self.layers:
            out.append(pos)
            pos += l.param_count
        return out

    def head_slice(self) -> slice:
        start = self.offsets[-1]
        return slice(start, start + self.layers[-1].param_count)

    def to_dict(self) -> dict:
        return {"layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]))

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def with_head(self, num_classes: int) -> "NetworkSpec":
        head = self.layers[-1]
        return NetworkSpec(self.layers[:-1] + (Dense(head.in_dim, num_classes),))


def mlp_spec(input_dim: int, hidden: Sequence[int], output_dim: int, leaky_slope: Optional[float] = None) -> NetworkSpec:
    layers: List[Layer] = []
    prev = input_dim
    for h in hidden:
        layers.append(Dense(prev, h))
        layers.append(ReLU() if leaky_slope is None else LeakyReLU(leaky_slope))
        prev = h
    layers.append(Dense(prev, output_dim))
    return NetworkSpec(tuple(layers))


@dataclass(frozen=True, eq=False)
class BaseModel:
    """A network spec together with concrete weights.

    Used both as the frozen anchor of a tangent space and as a plain
    non-linear model for the baselines.
    """

    spec: NetworkSpec
    weights: ParamVector

    def __post_init__(self):
        if not isinstance(self.weights, ParamVector):
            object.__setattr__(self, "weights", ParamVector(self.weights))
        if self.weights.dim != self.spec.param_count:
            raise DimensionMismatch(
                f"weights have dim {self.weights.dim}, spec needs {self.spec.param_count}"
            )

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.encode())
        h.update(self.weights.values.astype("<f8").tobytes())
        return h.hexdigest()

    @cached_property
    def unpacked(self) -> List[Optional[Tuple[np.ndarray, np.ndarray]]]:
        return unpack(self.spec, self.weights.values)


def unpack(spec: NetworkSpec, flat: np.ndarray) -> List[Optional[Tuple[np.ndarray, np.ndarray]]]:
    """Views ``(W, b)`` into ``flat`` for every dense layer, None for activations."""
    out: List[Optional[Tuple[np.ndarray, np.ndarray]]] = []
    for layer, off in zip(spec.layers, spec.offsets):
        if isinstance(layer, Dense):
            n_w = layer.out_dim * layer.in_dim
            W = flat[off:off + n_w].reshape(layer.out_dim, layer.in_dim)
            b = flat[off + n_w:off + n_w + layer.out_dim]
            out.append((W, b))
        else:
            out.append(None)
    return out


def init_weights(spec: NetworkSpec, seed: int) -> ParamVector:
    """He-style fan-in initialization, zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(spec.param_count)
    for layer, wb in zip(spec.layers, unpack(spec, flat)):
        if wb is None:
            continue
        W, b = wb
        W[...] = rng.normal(0.0, np.sqrt(2.0 / layer.in_dim), size=W.shape)
    return ParamVector(flat)


def init_model(spec: NetworkSpec, seed: int) -> BaseModel:
    return BaseModel(spec, init_weights(spec, seed))


def reinit_head(model: BaseModel, num_classes: int, seed: int) -> BaseModel:
    """Replace the final dense layer with a fresh one of width ``num_classes``.

    The new head is drawn uniformly from ``+-1/sqrt(fan_in)`` (weights and
    biases), the usual default for a freshly constructed linear layer.
    """
    spec = model.spec.with_head(num_classes)
    head = spec.layers[-1]
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(head.in_dim)
    flat = np.empty(spec.param_count)
    keep = spec.offsets[-1]
    flat[:keep] = model.weights.values[:keep]
    flat[keep:] = rng.uniform(-bound, bound, size=spec.param_count - keep)
    return BaseModel(spec, ParamVector(flat))


def _as_batch(spec: NetworkSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"expected inputs of dim {spec.input_dim}, got shape {x.shape}")
    return x, single


def _act_grad(layer: Layer, z: np.ndarray) -> np.ndarray:
    # derivative of the activation at its pre-activation z; exactly 0 at z == 0 for relu
    if isinstance(layer, LeakyReLU):
        return np.where(z > 0, 1.0, layer.slope)
    return (z > 0).astype(np.float64)


def _activate(layer: Layer, z: np.ndarray) -> np.ndarray:
    if isinstance(layer, LeakyReLU):
        return np.where(z > 0, z, layer.slope * z)
    return np.maximum(z, 0.0)


def forward(model: BaseModel, x) -> np.ndarray:
    a, single = _as_batch(model.spec, x)
    for layer, wb in zip(model.spec.layers, model.unpacked):
        if wb is not None:
            W, b = wb
            a = a @ W.T + b
        else:
            a = _activate(layer, a)
    return a[0] if single else a


@dataclass
class DualActivations:
    """Per-layer primal values and their directional derivatives along one delta."""

    primal: List[np.ndarray]
    tangent: List[np.ndarray]


def dual_forward(model: BaseModel, delta: ParamVector, x) -> DualActivations:
    """Propagate (value, tangent) pairs through the network in one pass."""
    if delta.dim != model.weights.dim:
        raise DimensionMismatch(f"delta has dim {delta.dim}, model has {model.weights.dim}")
    a, _ = _as_batch(model.spec, x)
    da = np.zeros_like(a)
    primal, tangent = [a], [da]
    for layer, wb, dwb in zip(model.spec.layers, model.unpacked, unpack(model.spec, delta.values)):
        if wb is not None:
            W, b = wb
            dW, db = dwb
            a, da = a @ W.T + b, da @ W.T + a @ dW.T + db
        else:
            g = _act_grad(layer, a)
            a, da = _activate(layer, a), da * g
        primal.append(a)
        tangent.append(da)
    return DualActivations(primal, tangent)


def jvp_forward(model: BaseModel, delta: ParamVector, x) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and their directional derivative ``J(x) @ delta``."""
    _, single = _as_batch(model.spec, x)
    acts = dual_forward(model, delta, x)
    p, t = acts.primal[-1], acts.tangent[-1]
    return (p[0], t[0]) if single else (p, t)


def _forward_cache(model: BaseModel, a: np.ndarray) -> List[np.ndarray]:
    cache = [a]
    for layer, wb in zip(model.spec.layers, model.unpacked):
        if wb is not None:
            W, b = wb
            a = a @ W.T + b
        else:
            a = _activate(layer, a)
        cache.append(a)
    return cache


def vjp_backward(model: BaseModel, x, cotangent) -> ParamVector:
    """``J(x)^T @ cotangent``; for a batch, the sum over samples."""
    a, single = _as_batch(model.spec, x)
    v = np.asarray(cotangent, dtype=np.float64)
    if single:
        v = v[None, :]
    if v.shape != (a.shape[0], model.spec.output_dim):
        raise DimensionMismatch(
            f"cotangent shape {v.shape} does not match ({a.shape[0]}, {model.spec.output_dim})"
        )
    return vjp_from_cache(model, _forward_cache(model, a), v)


def backward_nonlinear(model: BaseModel, x, cotangent) -> ParamVector:
    """Reverse-mode gradient of the network at its own weights.

    Same computation as ``vjp_backward``; kept separate so baseline
    fine-tuning reads as what it is.
    """
    return vjp_backward(model, x, cotangent)


def primal_cache(model: BaseModel, x) -> List[np.ndarray]:
    """Forward activations of a batch, reusable across many deltas/cotangents.

    The linearized model only ever needs primal values at the anchor, so
    training can compute them once per batch (or once per dataset).
    """
    a, _ = _as_batch(model.spec, x)
    return _forward_cache(model, a)


def jvp_from_cache(model: BaseModel, cache: List[np.ndarray], delta: ParamVector) -> np.ndarray:
    """Tangent logits ``J(x) @ delta`` for the batch behind ``cache``."""
    if delta.dim != model.weights.dim:
        raise DimensionMismatch(f"delta has dim {delta.dim}, model has {model.weights.dim}")
    da = np.zeros_like(cache[0])
    for i, (layer, wb, dwb) in enumerate(zip(model.spec.layers, model.unpacked, unpack(model.spec, delta.values))):
        if wb is not None:
            W, _ = wb
            dW, db = dwb
            da = da @ W.T + cache[i] @ dW.T + db
        else:
            da = da * _act_grad(layer, cache[i])
    return da


def vjp_from_cache(model: BaseModel, cache: List[np.ndarray], cotangent: np.ndarray) -> ParamVector:
    grad = np.zeros(model.spec.param_count)
    gviews = unpack(model.spec, grad)
    g = np.asarray(cotangent, dtype=np.float64)
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer, wb = model.spec.layers[i], model.unpacked[i]
        if wb is not None:
            gW, gb = gviews[i]
            gW[...] = g.T @ cache[i]
            gb[...] = g.sum(axis=0)
            if i > 0:
                g = g @ wb[0]
        else:
            g = g * _act_grad(layer, cache[i])
    return ParamVector._wrap(grad)
