"""Flat parameter vectors and the arithmetic used to compose them."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class ParamVector:
    """Immutable float64 vector of model parameters (or a parameter delta).

    The backing array is marked read-only, so a ParamVector can be shared
    between threads and stored inside models without defensive copies.
    """

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("ParamVector must have positive dimension")
        arr.flags.writeable = False
        self._values = arr

    @classmethod
    def zeros(cls, dim: int) -> "ParamVector":
        return cls._wrap(np.zeros(int(dim)))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ParamVector":
        # takes ownership of a freshly computed array, skipping the copy
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        arr.flags.writeable = False
        out._values = arr
        return out

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy."""
        return self._values.copy()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._values)))

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def dot(self, other: "ParamVector") -> float:
        _check_dims(self, other)
        return float(self._values @ other._values)

    def __len__(self) -> int:
        return self.dim

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self._values, other._values))

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        head = np.array2string(self._values[:6], precision=4)
        return f"ParamVector(dim={self.dim}, values={head}{'...' if self.dim > 6 else ''})"


def _check_dims(*vs: ParamVector) -> None:
    dims = {v.dim for v in vs}
    if len(dims) > 1:
        raise DimensionMismatch(f"parameter vectors have mismatched dims {sorted(dims)}")


def _check_scalar(c) -> float:
    c = float(c)
    if not np.isfinite(c):
        raise ValueError(f"scalar coefficient must be finite, got {c}")
    return c


def add(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_dims(a, b)
    return ParamVector._wrap(a.values + b.values)


def scale(a: ParamVector, c: float) -> ParamVector:
    return ParamVector._wrap(a.values * _check_scalar(c))


def axpy(c: float, a: ParamVector, b: ParamVector) -> ParamVector:
    """c * a + b."""
    _check_dims(a, b)
    c = _check_scalar(c)
    out = np.multiply(a.values, c)
    out += b.values
    return ParamVector._wrap(out)


def linear_combine(vs: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Unconstrained weighted sum, accumulated in list order."""
    if len(vs) == 0:
        raise ValueError("cannot combine an empty list of vectors")
    if len(vs) != len(weights):
        raise ValueError(f"{len(vs)} vectors but {len(weights)} weights")
    _check_dims(*vs)
    out = np.zeros(vs[0].dim)
    for v, w in zip(vs, weights):
        out += _check_scalar(w) * v.values
    return ParamVector._wrap(out)


def convex_combine(vs: Sequence[ParamVector], weights: Sequence[float], tol: float = 1e-9) -> ParamVector:
    if len(vs) == 0:
        raise ValueError("cannot combine an empty list of vectors")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("convex weights must be nonnegative")
    if abs(w.sum() - 1.0) > tol:
        raise ValueError(f"convex weights must sum to 1, got {w.sum():.12g}")
    return linear_combine(vs, w)
