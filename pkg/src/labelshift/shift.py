"""Shift simulation and task construction.

Implements the benchmark protocol: draw a target label marginal from a
Dirichlet around the pool's base marginal (smaller alpha = more severe
shift), subsample the target pool to realize that marginal exactly (up to
rounding), and split both domains into train/holdout parts. The synthetic
generator produces Gaussian class-conditional tasks where the conditional
shift between domains is a per-class translation of norm epsilon, which
bounds the per-class Wasserstein-infinity distance by exactly epsilon
(epsilon = 0 is pure label shift).
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from labelshift.core import (
    DegenerateEstimateError,
    DimensionError,
    EmptyInputError,
    InfeasibleMarginalError,
    InvalidInputError,
    LabelMarginal,
    LabeledSet,
    ParseError,
    PredictionMatrix,
    RngStream,
)

# Fraction of each domain held out for validation / final evaluation.
HOLDOUT_FRACTION = 0.2


@dataclass(frozen=True)
class ShiftSpec:
    """One marginal-shift scenario: Dirichlet concentration, conditional-shift
    budget, and the seed that makes the draw reproducible.

    alpha=None means no external marginal shift (the base marginal is kept).
    """

    alpha: float | None
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"alpha must be positive or None, got {self.alpha!r}")
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise InvalidInputError(f"epsilon must be a nonnegative float, got {self.epsilon!r}")


@dataclass(frozen=True)
class SynthTaskSpec:
    """Gaussian-blob task: k unit-covariance classes in d >= k dimensions with
    means on scaled one-hot vertices (pairwise distance class_separation)."""

    name: str
    k: int
    d: int
    n_source: int
    n_target: int
    class_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise InvalidInputError(f"need k >= 2 classes, got {self.k}")
        if self.d < self.k:
            raise InvalidInputError(
                f"the vertex layout needs d >= k, got d={self.d} < k={self.k}"
            )
        if self.n_source < 2 or self.n_target < 2:
            raise InvalidInputError("need at least 2 source and 2 target examples")
        if not (np.isfinite(self.class_separation) and self.class_separation > 0):
            raise InvalidInputError("class_separation must be positive")


@dataclass(frozen=True, eq=False)
class TaskBundle:
    """A fully materialized benchmark task: four labeled splits plus the
    realized target marginal and the provenance scalars that generated them.

    The recorded marginal must match the empirical marginal of
    target_train + target_test to within 1/n per class.
    """

    name: str
    k: int
    d: int
    alpha: float | None
    epsilon: float
    seed: int
    source_train: LabeledSet
    source_val: LabeledSet
    target_train: LabeledSet
    target_test: LabeledSet
    true_target_marginal: LabelMarginal

    def __post_init__(self):
        sets = {
            "source_train": self.source_train,
            "source_val": self.source_val,
            "target_train": self.target_train,
            "target_test": self.target_test,
        }
        for label, ds in sets.items():
            if ds.d != self.d:
                raise DimensionError(f"{label} has d={ds.d}, manifest says {self.d}")
            if ds.labels.max() >= self.k:
                raise InvalidInputError(f"{label} contains labels >= k={self.k}")
        if self.true_target_marginal.k != self.k:
            raise DimensionError("true_target_marginal does not match k")
        combined = np.concatenate([self.target_train.labels, self.target_test.labels])
        empirical = np.bincount(combined, minlength=self.k) / combined.size
        dev = np.abs(empirical - self.true_target_marginal.probs).max()
        if dev > 1.0 / combined.size + 1e-9:
            raise InvalidInputError(
                f"recorded target marginal deviates from the data by {dev:.3g} per class"
            )


def dirichlet_marginal(p_t0: LabelMarginal, spec: ShiftSpec) -> LabelMarginal:
    """One draw p ~ Dirichlet(alpha * p_t0), via normalized Gamma variables.

    alpha=None returns p_t0 unchanged; classes with zero base mass stay zero.
    Deterministic in spec.seed.
    """
    if spec.alpha is None:
        return p_t0
    beta = spec.alpha * p_t0.probs
    positive = beta > 0
    gen = RngStream(spec.seed).derive("dirichlet").generator()
    for _ in range(100):
        draws = np.zeros(p_t0.k)
        draws[positive] = gen.standard_gamma(beta[positive])
        total = draws.sum()
        if total > 0:
            return LabelMarginal(draws / total)
    raise DegenerateEstimateError("Dirichlet draw underflowed to zero mass repeatedly")


def _largest_remainder(n: int, target: np.ndarray) -> np.ndarray:
    raw = n * target
    counts = np.floor(raw).astype(np.int64)
    shortfall = int(n - counts.sum())
    if shortfall > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:shortfall]] += 1
    return counts


def realize_marginal(pool_labels, target: LabelMarginal, stream: RngStream) -> np.ndarray:
    """Select the largest subsample whose label proportions hit the target.

    Finds the largest N whose largest-remainder allocation round(N * target_y)
    fits within the pool's per-class counts, then draws that many indices per
    class without replacement. The realized marginal is within 1/N of the
    target per class. Returns sorted pool indices.
    """
    labels = np.asarray(pool_labels)
    if labels.size == 0:
        raise EmptyInputError("pool is empty")
    k = target.k
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidInputError(f"pool labels must lie in [0, {k})")
    counts = np.bincount(labels, minlength=k)
    t = target.probs
    missing = np.nonzero((t > 0) & (counts == 0))[0]
    if missing.size:
        raise InfeasibleMarginalError(
            f"target marginal needs classes {missing.tolist()} absent from the pool"
        )

    need = t > 0
    cap = int(np.floor(((counts[need] + 1) / t[need]).min()))
    allocation = None
    for n in range(min(cap, int(labels.size)), 0, -1):
        candidate = _largest_remainder(n, t)
        if np.all(candidate <= counts):
            allocation = candidate
            break
    if allocation is None:
        raise InfeasibleMarginalError("no feasible subsample size")

    gen = stream.generator()
    chosen = []
    for y in range(k):
        if allocation[y] == 0:
            continue
        pool_y = np.nonzero(labels == y)[0]
        chosen.append(gen.choice(pool_y, size=int(allocation[y]), replace=False))
    return np.sort(np.concatenate(chosen))


def split_holdout(n: int, fraction: float, stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint (train, holdout) index split with round(fraction * n)
    holdout rows, clamped so both sides keep at least one row."""
    if n < 2:
        raise InvalidInputError(f"need n >= 2 to split, got {n}")
    if not (0.0 < fraction < 1.0):
        raise InvalidInputError(f"fraction must lie in (0, 1), got {fraction!r}")
    n_hold = int(np.floor(fraction * n + 0.5))
    n_hold = max(1, min(n_hold, n - 1))
    perm = stream.generator().permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def class_means(task: SynthTaskSpec) -> np.ndarray:
    """(k, d) class means: one-hot vertices scaled so pairwise distances equal
    class_separation exactly."""
    means = np.zeros((task.k, task.d))
    means[np.arange(task.k), np.arange(task.k)] = task.class_separation / np.sqrt(2.0)
    return means


def conditional_shift_deltas(task: SynthTaskSpec, epsilon: float) -> np.ndarray:
    """Per-class translation vectors of norm epsilon in seeded random directions."""
    if epsilon == 0.0:
        return np.zeros((task.k, task.d))
    gen = RngStream(task.seed).derive("delta").generator()
    raw = gen.standard_normal((task.k, task.d))
    return epsilon * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def bayes_predictions(features, means: np.ndarray, marginal: LabelMarginal) -> PredictionMatrix:
    """Exact posterior for unit-covariance Gaussian classes under a marginal.

    This is the calibrated reference classifier for synthetic tasks; pass
    means + deltas to score against the shifted target conditionals.
    """
    x = np.asarray(features, dtype=np.float64)
    logp = np.where(marginal.probs > 0, np.log(np.maximum(marginal.probs, 1e-300)), -np.inf)
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    scores = logp[None, :] - 0.5 * sq
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    return PredictionMatrix(exp / exp.sum(axis=1, keepdims=True))


def apply_shift_protocol(
    name: str,
    k: int,
    source_pool: LabeledSet,
    target_pool: LabeledSet,
    shift: ShiftSpec,
    p_t0: LabelMarginal | None = None,
) -> TaskBundle:
    """Turn a fixed pair of pools into a benchmark task under one shift draw.

    Draws the target marginal around p_t0 (default: the target pool's
    empirical marginal), zeroes classes the pool cannot supply, realizes the
    draw by subsampling, and splits both domains 80/20. For non-synthetic
    pools shift.epsilon is recorded as metadata; the actual conditional shift
    is whatever the data carries.
    """
    if source_pool.d != target_pool.d:
        raise DimensionError(
            f"source pool has d={source_pool.d}, target pool d={target_pool.d}"
        )
    if p_t0 is None:
        p_t0 = LabelMarginal.from_labels(target_pool.labels, k)
    p_t = dirichlet_marginal(p_t0, shift)

    # A draw can ask for classes the pool never produced; drop them and
    # renormalize. The recorded truth is the realized empirical marginal.
    counts = np.bincount(target_pool.labels, minlength=k)
    mass = np.where(counts > 0, p_t.probs, 0.0)
    if mass.sum() <= 0:
        raise InfeasibleMarginalError("drawn marginal has no mass on populated classes")
    p_t = LabelMarginal(mass / mass.sum())

    base = RngStream(shift.seed)
    realized = realize_marginal(target_pool.labels, p_t, base.derive("realize"))
    target = target_pool.subset(realized)

    src_train_idx, src_val_idx = split_holdout(
        source_pool.n, HOLDOUT_FRACTION, base.derive("split_source")
    )
    tgt_train_idx, tgt_test_idx = split_holdout(
        target.n, HOLDOUT_FRACTION, base.derive("split_target")
    )
    return TaskBundle(
        name=name,
        k=k,
        d=source_pool.d,
        alpha=shift.alpha,
        epsilon=shift.epsilon,
        seed=shift.seed,
        source_train=source_pool.subset(src_train_idx),
        source_val=source_pool.subset(src_val_idx),
        target_train=target.subset(tgt_train_idx),
        target_test=target.subset(tgt_test_idx),
        true_target_marginal=LabelMarginal.from_labels(target.labels, k),
    )


def synth_relaxed_task(task: SynthTaskSpec, shift: ShiftSpec) -> TaskBundle:
    """Generate a synthetic relaxed-label-shift task.

    Source labels are uniform; target pool labels are drawn from the
    Dirichlet marginal around uniform and then realized exactly. Target
    class-conditionals are the source Gaussians translated by norm-epsilon
    deltas in seeded random directions.
    """
    means = class_means(task)
    deltas = conditional_shift_deltas(task, shift.epsilon)
    base = RngStream(task.seed)

    g_src = base.derive("source").generator()
    src_labels = g_src.integers(0, task.k, size=task.n_source)
    src_x = means[src_labels] + g_src.standard_normal((task.n_source, task.d))
    source_pool = LabeledSet(src_x, src_labels)

    p_t = dirichlet_marginal(LabelMarginal.uniform(task.k), shift)
    g_tgt = base.derive("target").generator()
    tgt_labels = g_tgt.choice(task.k, size=task.n_target, p=p_t.probs)
    tgt_x = means[tgt_labels] + deltas[tgt_labels] + g_tgt.standard_normal((task.n_target, task.d))
    target_pool = LabeledSet(tgt_x, tgt_labels)

    return apply_shift_protocol(
        task.name, task.k, source_pool, target_pool, shift,
        p_t0=LabelMarginal.uniform(task.k),
    )


# ---------------------------------------------------------------------------
# Persistence: labeled CSVs and bundle directories.

_HEADER_RE = re.compile(r"^f(\d+)$")
_MANIFEST_KEYS = ("name", "k", "d", "alpha", "epsilon", "seed", "true_target_marginal")


def save_labeled_csv(path, data: LabeledSet) -> None:
    """Write a labeled set as CSV with header f0,...,f{d-1},y; floats use the
    shortest exact representation so round-trips are lossless."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(data.d)] + ["y"])
        for row, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(y)])


def load_labeled_csv(path) -> LabeledSet:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 2 or header[-1] != "y":
            raise ParseError(f"{path}: header must be f0,...,f{{d-1}},y")
        for j, col in enumerate(header[:-1]):
            m = _HEADER_RE.match(col)
            if not m or int(m.group(1)) != j:
                raise ParseError(f"{path}: feature column {j} is named {col!r}, expected f{j}")
        d = len(header) - 1
        features, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise ParseError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                features.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise ParseError(f"{path}: no data rows")
    try:
        return LabeledSet(np.array(features), np.array(labels))
    except (InvalidInputError, DimensionError) as exc:
        raise ParseError(f"{path}: {exc}") from None


_BUNDLE_FILES = {
    "source_train": "source_train.csv",
    "source_val": "source_val.csv",
    "target_train": "target_train.csv",
    "target_test": "target_test.csv",
}


def save_bundle(bundle: TaskBundle, directory) -> None:
    """Persist a bundle as four CSVs plus manifest.json in a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for attr, fname in _BUNDLE_FILES.items():
        save_labeled_csv(directory / fname, getattr(bundle, attr))
    manifest = {
        "name": bundle.name,
        "k": bundle.k,
        "d": bundle.d,
        "alpha": bundle.alpha,
        "epsilon": bundle.epsilon,
        "seed": bundle.seed,
        "true_target_marginal": bundle.true_target_marginal.probs.tolist(),
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_bundle(directory) -> TaskBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ParseError(f"{manifest_path}: missing manifest")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{manifest_path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise ParseError(f"{manifest_path}: manifest must be a JSON object")
    unknown = sorted(set(manifest) - set(_MANIFEST_KEYS))
    if unknown:
        raise ParseError(f"{manifest_path}: unknown manifest keys {unknown}")
    missing = sorted(set(_MANIFEST_KEYS) - set(manifest))
    if missing:
        raise ParseError(f"{manifest_path}: missing manifest keys {missing}")
    sets = {attr: load_labeled_csv(directory / fname) for attr, fname in _BUNDLE_FILES.items()}
    try:
        return TaskBundle(
            name=manifest["name"],
            k=int(manifest["k"]),
            d=int(manifest["d"]),
            alpha=None if manifest["alpha"] is None else float(manifest["alpha"]),
            epsilon=float(manifest["epsilon"]),
            seed=int(manifest["seed"]),
            true_target_marginal=LabelMarginal(np.asarray(manifest["true_target_marginal"])),
            **sets,
        )
    except (InvalidInputError, DimensionError) as exc:
        raise ParseError(f"{directory}: inconsistent bundle: {exc}") from None
