"""Core types, errors, deterministic RNG streams, and simplex utilities.

Everything downstream (estimators, shift simulation, training, the benchmark
harness) builds on the validated containers and the counter-based RNG defined
here. Arrays stored in the containers are float64 and read-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

# Tolerance used when validating that probability mass sums to 1. Vectors are
# renormalized to an exact sum after passing this check.
SUM_TOLERANCE = 1e-6


class LabelShiftError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(LabelShiftError):
    """Input contains non-finite, negative, or otherwise out-of-range values."""


class DimensionError(LabelShiftError):
    """Shapes of related inputs do not line up."""


class EmptyInputError(LabelShiftError):
    """An operation received zero rows where at least one is required."""


class DegenerateEstimateError(LabelShiftError):
    """An estimate collapsed to zero mass everywhere and cannot be normalized."""


class InfeasibleMarginalError(LabelShiftError):
    """A requested label marginal cannot be realized from the available pool."""


class ParseError(LabelShiftError):
    """A file being ingested violates its documented format."""


class PairingError(LabelShiftError):
    """Two records being compared do not belong to the same benchmark cell."""


class DivergedError(LabelShiftError):
    """An iterative routine produced non-finite values."""


def _as_float_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LabelMarginal:
    """A probability vector over k >= 2 classes.

    Entries must be nonnegative and sum to 1 within SUM_TOLERANCE; the stored
    vector is renormalized to an exact unit sum.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = _as_float_vector(self.probs, "probs")
        if p.size < 2:
            raise DimensionError(f"a label marginal needs k >= 2 classes, got {p.size}")
        if np.any(p < 0):
            raise InvalidInputError("marginal entries must be nonnegative")
        total = float(p.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise InvalidInputError(f"marginal sums to {total!r}, expected 1 within {SUM_TOLERANCE}")
        object.__setattr__(self, "probs", _freeze(p / total))

    @property
    def k(self) -> int:
        return int(self.probs.size)

    @classmethod
    def uniform(cls, k: int) -> "LabelMarginal":
        return cls(np.full(k, 1.0 / k))

    @classmethod
    def from_labels(cls, labels, k: int) -> "LabelMarginal":
        """Empirical marginal of an integer label vector over k classes."""
        labels = np.asarray(labels)
        if labels.size == 0:
            raise EmptyInputError("cannot take the empirical marginal of zero labels")
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        return cls(counts / counts.sum())


@dataclass(frozen=True, eq=False)
class ImportanceWeights:
    """Per-class importance ratios w(y) = p_t(y) / p_s(y) against a reference marginal.

    Feasible weights satisfy w >= 0 and sum_y w(y) * reference(y) = 1 within
    SUM_TOLERANCE.
    """

    weights: np.ndarray
    reference: LabelMarginal

    def __post_init__(self):
        w = _as_float_vector(self.weights, "weights")
        if w.size != self.reference.k:
            raise DimensionError(
                f"got {w.size} weights for a {self.reference.k}-class reference marginal"
            )
        if np.any(w < 0):
            raise InvalidInputError("importance weights must be nonnegative")
        mass = float(w @ self.reference.probs)
        if abs(mass - 1.0) > SUM_TOLERANCE:
            raise InvalidInputError(
                f"weights are infeasible: sum_y w(y) p_s(y) = {mass!r}, expected 1"
            )
        object.__setattr__(self, "weights", _freeze(w))

    @property
    def k(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """Row-stochastic (n, k) matrix of predicted class probabilities.

    Rows must be nonnegative and sum to 1 within SUM_TOLERANCE; each row is
    renormalized to an exact unit sum.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"predictions must be 2-dimensional, got shape {v.shape}")
        if v.shape[0] < 1:
            raise EmptyInputError("prediction matrix has no rows")
        if v.shape[1] < 2:
            raise DimensionError(f"predictions need k >= 2 columns, got {v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("predictions contain non-finite values")
        if np.any(v < 0):
            raise InvalidInputError("predicted probabilities must be nonnegative")
        sums = v.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > SUM_TOLERANCE)[0]
        if bad.size:
            raise InvalidInputError(
                f"prediction row {bad[0]} sums to {sums[bad[0]]!r}, expected 1 within {SUM_TOLERANCE}"
            )
        object.__setattr__(self, "values", _freeze(v / sums[:, None]))

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def k(self) -> int:
        return int(self.values.shape[1])

    def argmax_labels(self) -> np.ndarray:
        """Hard labels; ties break toward the lowest class index."""
        return np.argmax(self.values, axis=1)


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """An (n, d) float feature matrix paired with n integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise DimensionError(f"features must be 2-dimensional, got shape {x.shape}")
        if x.shape[0] < 1:
            raise EmptyInputError("labeled set has no examples")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("features contain non-finite values")
        if y.ndim != 1:
            raise DimensionError(f"labels must be 1-dimensional, got shape {y.shape}")
        if y.shape[0] != x.shape[0]:
            raise DimensionError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.floor(y)):
                raise InvalidInputError("labels must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0):
            raise InvalidInputError("labels must be nonnegative")
        x = np.array(x, copy=True)
        x.setflags(write=False)
        y = np.array(y, dtype=np.int64, copy=True)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "LabeledSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.features[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class SoftConfusion:
    """Joint matrix C[i, j] = (1/n) sum_x f_i(x) 1{y(x) = j}.

    Column j sums to the empirical source frequency of class j, so the whole
    matrix sums to 1. zero_classes lists classes with no support (all-zero
    columns), which downstream solvers treat as unidentifiable.
    """

    matrix: np.ndarray
    zero_classes: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got shape {m.shape}")
        if m.shape[0] < 2:
            raise DimensionError("confusion matrix needs k >= 2 classes")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("confusion matrix contains non-finite values")
        if np.any(m < 0):
            raise InvalidInputError("confusion matrix entries must be nonnegative")
        total = float(m.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise InvalidInputError(f"confusion matrix sums to {total!r}, expected 1")
        object.__setattr__(self, "matrix", _freeze(m))
        object.__setattr__(self, "zero_classes", tuple(int(j) for j in self.zero_classes))

    @property
    def k(self) -> int:
        return int(self.matrix.shape[0])

    def column_sums(self) -> np.ndarray:
        """Empirical source label marginal implied by the matrix."""
        return self.matrix.sum(axis=0)


def _jsonable(label):
    if isinstance(label, np.integer):
        return int(label)
    if isinstance(label, np.floating):
        return float(label)
    if label is None or isinstance(label, (bool, int, float, str)):
        return label
    raise InvalidInputError(f"stream labels must be JSON scalars, got {type(label).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (seed, stream_id).

    Streams with equal keys produce identical draw sequences on every platform
    and under any scheduling; generator() always starts from the beginning of
    the stream. derive() hashes labels into a child stream id, so independent
    purposes ("init", "shuffle", ...) never share draws.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.stream_id % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *labels) -> "RngStream":
        payload = json.dumps(
            [self.stream_id % 2**64, *[_jsonable(x) for x in labels]],
            separators=(",", ":"),
        ).encode()
        child = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")
        return RngStream(self.seed, child)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a finite vector onto the probability simplex.

    Sort-based O(k log k) form: with u the descending sort of v and
    theta_j = (cumsum(u)_j - 1) / j, the active threshold is theta at the
    largest j with u_j > theta_j, and the projection is max(v - theta, 0).
    """
    v = _as_float_vector(v, "v")
    if v.size == 0:
        raise EmptyInputError("cannot project an empty vector")
    u = np.sort(v)[::-1]
    thresholds = (np.cumsum(u) - 1.0) / np.arange(1, v.size + 1)
    rho = np.nonzero(u > thresholds)[0][-1]
    return np.clip(v - thresholds[rho], 0.0, None)


def l1_distance(p, q) -> float:
    """Sum of absolute coordinate differences between two equal-length vectors."""
    p = _as_float_vector(getattr(p, "probs", p), "p")
    q = _as_float_vector(getattr(q, "probs", q), "q")
    if p.size != q.size:
        raise DimensionError(f"length mismatch: {p.size} vs {q.size}")
    return float(np.abs(p - q).sum())


def weights_to_marginal(weights, source_marginal) -> LabelMarginal:
    """Convert importance weights into the target marginal w(y) * p_s(y), normalized."""
    if isinstance(weights, ImportanceWeights):
        weights = weights.weights
    if isinstance(source_marginal, LabelMarginal):
        source_marginal = source_marginal.probs
    w = _as_float_vector(weights, "weights")
    p = _as_float_vector(source_marginal, "source_marginal")
    if w.size != p.size:
        raise DimensionError(f"length mismatch: {w.size} weights vs {p.size} classes")
    if np.any(w < 0) or np.any(p < 0):
        raise InvalidInputError("weights and marginal entries must be nonnegative")
    mass = w * p
    total = mass.sum()
    if total <= 0:
        raise DegenerateEstimateError("w(y) * p_s(y) has zero total mass")
    return LabelMarginal(mass / total)
