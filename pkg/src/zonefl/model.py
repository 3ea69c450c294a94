"""Desk-scale trainable models: linear regression and binary logistic classification.

Parameters are stored as one flat vector ``[w_1 .. w_d, b]`` so that model
deltas, averages and inner products are plain vector arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence, Union

import numpy as np

LINEAR = "linear_regression"
LOGISTIC = "logistic_classification"
MODEL_KINDS = (LINEAR, LOGISTIC)


class EmptyDatasetError(ValueError):
    """Raised when a loss or gradient is requested over zero samples."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    vector: np.ndarray
    kind: str = LINEAR

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        vec = np.array(self.vector, dtype=float)
        if vec.ndim != 1 or vec.size < 2:
            raise DimensionError("parameter vector must hold at least one weight and a bias")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @classmethod
    def zeros(cls, dim: int, kind: str = LINEAR) -> "ModelParams":
        return cls(np.zeros(dim + 1), kind)

    @classmethod
    def from_parts(cls, weights, bias: float, kind: str = LINEAR) -> "ModelParams":
        return cls(np.append(np.asarray(weights, dtype=float), float(bias)), kind)

    @property
    def dim(self) -> int:
        return self.vector.size - 1

    @property
    def weights(self) -> np.ndarray:
        return self.vector[:-1]

    @property
    def bias(self) -> float:
        return float(self.vector[-1])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector)))

    def shifted(self, delta: np.ndarray, scale: float = 1.0) -> "ModelParams":
        return ModelParams(self.vector + scale * delta, self.kind)


@dataclass(frozen=True)
class Gradient:
    """A parameter-space delta (``after - before``) plus the samples behind it."""

    delta: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        d = np.array(self.delta, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)
        if self.sample_count < 0:
            raise ValueError("sample_count must be nonnegative")


class Sample(NamedTuple):
    features: np.ndarray
    label: float
    zone_tag: str


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented sample storage; ``X`` is (n, d), ``y`` is (n,), ``zones`` is (n,)."""

    X: np.ndarray
    y: np.ndarray
    zones: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], dim: int | None = None) -> "SampleSet":
        if not samples:
            d = dim or 0
            return cls(np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=object))
        X = np.array([np.asarray(s.features, dtype=float) for s in samples])
        y = np.array([float(s.label) for s in samples])
        z = np.array([s.zone_tag for s in samples], dtype=object)
        return cls(X, y, z)

    @classmethod
    def empty(cls, dim: int) -> "SampleSet":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=object))

    def __len__(self) -> int:
        return self.y.shape[0]

    def __iter__(self):
        for x, y, z in zip(self.X, self.y, self.zones):
            yield Sample(x, float(y), z)

    def restrict(self, zone_ids) -> "SampleSet":
        mask = np.isin(self.zones, list(zone_ids))
        return SampleSet(self.X[mask], self.y[mask], self.zones[mask])

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            np.vstack([self.X, other.X]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.zones, other.zones]),
        )


SampleLike = Union[SampleSet, Sequence[Sample]]


def as_sample_set(samples: SampleLike) -> SampleSet:
    if isinstance(samples, SampleSet):
        return samples
    return SampleSet.from_samples(list(samples))


@dataclass(frozen=True)
class ClientDataset:
    client_id: str
    train: SampleSet
    validation: SampleSet
    _views: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def train_samples(self) -> list[Sample]:
        return list(self.train)

    @property
    def validation_samples(self) -> list[Sample]:
        return list(self.validation)

    @cached_property
    def zone_tags(self) -> frozenset:
        return frozenset(self.train.zones) | frozenset(self.validation.zones)

    def restrict(self, zone_ids) -> "ClientDataset":
        """Only the samples tagged with one of ``zone_ids``; views are cached."""
        key = frozenset(zone_ids)
        view = self._views.get(key)
        if view is None:
            view = ClientDataset(self.client_id, self.train.restrict(key), self.validation.restrict(key))
            self._views[key] = view
        return view


def _design(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_dim(params: ModelParams, X: np.ndarray) -> None:
    if X.shape[1] != params.dim:
        raise DimensionError(f"feature length {X.shape[1]} does not match model dimension {params.dim}")


def sigmoid(z):
    # split by sign to avoid overflow in exp
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(params: ModelParams, features) -> float | np.ndarray:
    """Regression output ``w.x + b``, or ``[P(y=0), P(y=1)]`` for the classifier."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 1 or x.size != params.dim:
        raise DimensionError(f"feature length {x.size} does not match model dimension {params.dim}")
    score = float(scores(params, x[None, :])[0])
    if params.kind == LINEAR:
        return score
    p1 = float(sigmoid(np.array([score]))[0])
    return np.array([1.0 - p1, p1])


def scores(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """``X @ w + b`` accumulated feature by feature.

    Column-wise accumulation makes each row's score independent of how many
    rows are scored together, so losses are reproducible sample by sample.
    """
    _check_dim(params, X)
    X = np.asarray(X, dtype=float)
    s = np.full(X.shape[0], float(params.bias))
    for j, w in enumerate(params.weights):
        s = s + X[:, j] * w
    return s


def per_sample_loss(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # a diverging run yields inf here; the protocol layer turns that into NumericFailure
    with np.errstate(over="ignore", invalid="ignore"):
        s = scores(params, X)
        if params.kind == LINEAR:
            return (s - y) ** 2
        # binary cross-entropy written with logaddexp for stability
        return np.logaddexp(0.0, s) - y * s


def dataset_loss(params: ModelParams, samples: SampleLike) -> float:
    """Mean per-sample loss: MSE for regression, cross-entropy for classification."""
    data = as_sample_set(samples)
    if len(data) == 0:
        raise EmptyDatasetError("loss of an empty sample set is undefined")
    # fsum is correctly rounded, so the mean does not depend on summation order
    return math.fsum(per_sample_loss(params, data.X, data.y)) / len(data)


def _loss_gradient(theta: np.ndarray, kind: str, A: np.ndarray, y: np.ndarray) -> np.ndarray:
    # A is the design matrix with a trailing column of ones
    s = A @ theta
    n = A.shape[0]
    if kind == LINEAR:
        return (2.0 / n) * (A.T @ (s - y))
    return (A.T @ (sigmoid(s) - y)) / n


def analytic_gradient(params: ModelParams, samples: SampleLike) -> Gradient:
    """Exact d(loss)/d(theta) of :func:`dataset_loss` (not a descent step)."""
    data = as_sample_set(samples)
    if len(data) == 0:
        raise EmptyDatasetError("gradient of an empty sample set is undefined")
    _check_dim(params, data.X)
    return Gradient(_loss_gradient(params.vector, params.kind, _design(data.X), data.y), len(data))


def local_train(
    params: ModelParams,
    data: ClientDataset | SampleLike,
    epochs: int,
    learning_rate: float,
    rng_seed=None,
    batch_size: int | None = None,
) -> Gradient | None:
    """Gradient descent from ``params``; returns ``theta_final - theta_initial``.

    Returns None when there is nothing to train on, so the caller can skip
    the client for this round. ``batch_size=None`` means full batch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    train = data.train if isinstance(data, ClientDataset) else as_sample_set(data)
    n = len(train)
    if n == 0:
        return None
    _check_dim(params, train.X)
    base = params.vector
    A = _design(train.X)
    delta = np.zeros_like(base)
    with np.errstate(over="ignore", invalid="ignore"):
        if batch_size is None or batch_size >= n:
            for _ in range(epochs):
                delta = delta - learning_rate * _loss_gradient(base + delta, params.kind, A, train.y)
        else:
            rng = np.random.default_rng(rng_seed)
            for _ in range(epochs):
                order = rng.permutation(n)
                for start in range(0, n, batch_size):
                    idx = order[start:start + batch_size]
                    delta = delta - learning_rate * _loss_gradient(base + delta, params.kind, A[idx], train.y[idx])
    return Gradient(delta, n)


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    pred = (scores(params, X) >= 0).astype(float)
    return float(np.mean(pred == y))


def rmse(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((scores(params, X) - y) ** 2)))
