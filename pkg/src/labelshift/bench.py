"""Benchmark grid over tasks, shift severities, seeds, methods, and
corrections.

Every cell derives its randomness from the top-level seed plus its own
coordinates, so results are identical whether cells run serially, in a
thread pool, or across resumed invocations. Records append to a JSONL file
as they complete; aggregation pairs each record with its uncorrected
source_only baseline and reports relative-accuracy statistics as CSV.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from labelshift.adapt import (
    ALGORITHMS,
    MODEL_KINDS,
    CorrectionFlags,
    ModelSpec,
    PseudoLabelConfig,
    TrainConfig,
    meta_adapt,
)
from labelshift.core import (
    DimensionError,
    InvalidInputError,
    LabelMarginal,
    PairingError,
    ParseError,
    PredictionMatrix,
    RngStream,
    l1_distance,
)
from labelshift.estimate import ESTIMATORS
from labelshift.shift import (
    ShiftSpec,
    SynthTaskSpec,
    apply_shift_protocol,
    load_labeled_csv,
    synth_relaxed_task,
)

RESULTS_FILENAME = "results.jsonl"
SUMMARY_FILENAME = "summary.csv"
SUMMARY_HEADER = (
    "alpha,method,corrections,estimator,n,"
    "mean_rel_acc,median_rel_acc,q25,q75,mean_l1,median_l1"
)

# Fields a results line may carry besides the mandatory coordinates.
_OPTIONAL_RECORD_FIELDS = (
    "estimator",
    "target_accuracy",
    "source_val_accuracy",
    "marginal_l1_error",
    "true_marginal",
    "estimated_marginal",
    "wall_time_seconds",
    "error",
)


@dataclass(frozen=True)
class GridTask:
    """One task axis entry: either a synthetic generator (its name and seed
    are overridden per cell) or a directory holding source.csv / target.csv
    pools. epsilon is the conditional-shift budget; for dataset pools it is
    recorded as metadata only, since their conditional shift is whatever the
    data carries."""

    name: str
    synth: SynthTaskSpec | None = None
    data_dir: str | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise InvalidInputError("task name must be nonempty")
        if (self.synth is None) == (self.data_dir is None):
            raise InvalidInputError(
                f"task {self.name!r} must set exactly one of synth or data_dir"
            )
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise InvalidInputError("epsilon must be finite and nonnegative")


@dataclass(frozen=True)
class GridConfig:
    tasks: tuple
    alphas: tuple = (None, 10.0, 3.0, 1.0, 0.5)
    seeds: tuple = (0, 1)
    methods: tuple = ("source_only", "pseudolabel")
    corrections: tuple = (CorrectionFlags(), CorrectionFlags(resample=True, reweight=True))
    estimators: tuple = ("rlls",)
    seed: int = 0
    output_dir: str = "results"
    model_kind: str = "logistic"
    hidden_units: int = 32
    train: TrainConfig = TrainConfig()
    pseudolabel: PseudoLabelConfig = PseudoLabelConfig()

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(
            self, "alphas",
            tuple(None if a is None else float(a) for a in self.alphas),
        )
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "corrections", tuple(self.corrections))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for field in ("tasks", "alphas", "seeds", "methods", "corrections"):
            if not getattr(self, field):
                raise InvalidInputError(f"grid needs a nonempty {field} axis")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise InvalidInputError(f"task names must be unique, got {names}")
        for task in self.tasks:
            if not isinstance(task, GridTask):
                raise InvalidInputError("tasks must be GridTask entries")
        for a in self.alphas:
            if a is not None and not (np.isfinite(a) and a > 0):
                raise InvalidInputError(f"alpha must be None or positive, got {a}")
        for m in self.methods:
            if m not in ALGORITHMS:
                raise InvalidInputError(f"unknown method {m!r}; expected one of {ALGORITHMS}")
        for c in self.corrections:
            if not isinstance(c, CorrectionFlags):
                raise InvalidInputError("corrections must be CorrectionFlags entries")
            if c.estimator is not None and c.estimator not in ESTIMATORS:
                raise InvalidInputError(f"unknown estimator {c.estimator!r}")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise InvalidInputError(f"unknown estimator {e!r}; expected one of {ESTIMATORS}")
        if any(c.reweight and c.estimator is None for c in self.corrections):
            if not self.estimators:
                raise InvalidInputError("reweighting corrections need an estimators list")
        if self.model_kind not in MODEL_KINDS:
            raise InvalidInputError(f"unknown model kind {self.model_kind!r}")
        if self.hidden_units < 1:
            raise InvalidInputError("hidden_units must be positive")


@dataclass(frozen=True)
class Cell:
    """One planned grid cell with the estimator already resolved."""

    task: GridTask
    alpha: float | None
    seed: int
    method: str
    corrections: CorrectionFlags

    def key(self) -> tuple:
        return (
            self.task.name,
            self.alpha,
            self.seed,
            self.method,
            self.corrections.label(),
            self.corrections.estimator or "",
        )


@dataclass(frozen=True)
class RunRecord:
    task_id: str
    alpha: float | None
    seed: int
    method: str
    corrections: str
    estimator: str | None = None
    target_accuracy: float | None = None
    source_val_accuracy: float | None = None
    marginal_l1_error: float | None = None
    true_marginal: tuple | None = None
    estimated_marginal: tuple | None = None
    wall_time_seconds: float | None = None
    error: str | None = None

    def key(self) -> tuple:
        return (
            self.task_id,
            self.alpha,
            self.seed,
            self.method,
            self.corrections,
            self.estimator or "",
        )

    def to_json_dict(self) -> dict:
        out = {
            "v": 1,
            "task_id": self.task_id,
            "alpha": self.alpha,
            "seed": self.seed,
            "method": self.method,
            "corrections": self.corrections,
        }
        for name in _OPTIONAL_RECORD_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_json_dict(cls, payload: dict) -> "RunRecord":
        if payload.get("v") != 1:
            raise ParseError(f"unsupported record version {payload.get('v')!r}")
        known = {"v", "task_id", "alpha", "seed", "method", "corrections",
                 *_OPTIONAL_RECORD_FIELDS}
        unknown = set(payload) - known
        if unknown:
            raise ParseError(f"unknown record fields {sorted(unknown)}")
        try:
            alpha = payload["alpha"]
            return cls(
                task_id=payload["task_id"],
                alpha=None if alpha is None else float(alpha),
                seed=int(payload["seed"]),
                method=payload["method"],
                corrections=payload["corrections"],
                estimator=payload.get("estimator"),
                target_accuracy=payload.get("target_accuracy"),
                source_val_accuracy=payload.get("source_val_accuracy"),
                marginal_l1_error=payload.get("marginal_l1_error"),
                true_marginal=(tuple(payload["true_marginal"])
                               if "true_marginal" in payload else None),
                estimated_marginal=(tuple(payload["estimated_marginal"])
                                    if "estimated_marginal" in payload else None),
                wall_time_seconds=payload.get("wall_time_seconds"),
                error=payload.get("error"),
            )
        except KeyError as exc:
            raise ParseError(f"record is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Summary:
    """Aggregated relative-accuracy and marginal-error statistics for one
    (alpha, method, corrections, estimator) group."""

    alpha: float | None
    method: str
    corrections: str
    estimator: str | None
    n: int
    mean_rel_acc: float
    median_rel_acc: float
    q25: float
    q75: float
    mean_l1: float | None
    median_l1: float | None


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    marginal_l1_error: float | None = None


def evaluate(preds: PredictionMatrix, labels, p_hat_t=None, p_true=None) -> EvalMetrics:
    """Target accuracy (argmax, ties toward the lowest class) plus the l1
    error between estimated and true marginal when both are given."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != preds.n:
        raise DimensionError(
            f"labels have shape {labels.shape}, predictions have {preds.n} rows"
        )
    accuracy = float(np.mean(preds.argmax_labels() == labels))
    l1 = None
    if p_hat_t is not None and p_true is not None:
        l1 = l1_distance(p_hat_t, p_true)
    return EvalMetrics(accuracy=accuracy, marginal_l1_error=l1)


def relative_accuracy(record: RunRecord, baseline: RunRecord) -> float:
    """record.target_accuracy minus the paired uncorrected source_only
    accuracy on the same (task, alpha, seed)."""
    if baseline.method != "source_only" or baseline.corrections != "none":
        raise PairingError(
            f"baseline must be uncorrected source_only, got "
            f"{baseline.method}/{baseline.corrections}"
        )
    mine = (record.task_id, record.alpha, record.seed)
    theirs = (baseline.task_id, baseline.alpha, baseline.seed)
    if mine != theirs:
        raise PairingError(f"record {mine} paired against baseline {theirs}")
    if record.target_accuracy is None or baseline.target_accuracy is None:
        raise PairingError(f"cell {record.key()} has no accuracy (failed run?)")
    return record.target_accuracy - baseline.target_accuracy


def plan_cells(cfg: GridConfig) -> list[Cell]:
    """The full cross product with reweighting entries expanded over the
    configured estimators. Deterministic order; duplicate cells rejected."""
    cells: list[Cell] = []
    seen = set()
    for task in cfg.tasks:
        for alpha in cfg.alphas:
            for seed in cfg.seeds:
                for method in cfg.methods:
                    for flags in cfg.corrections:
                        if flags.reweight:
                            estimators = (
                                (flags.estimator,) if flags.estimator else cfg.estimators
                            )
                            resolved = [replace(flags, estimator=e) for e in estimators]
                        else:
                            resolved = [replace(flags, estimator=None)]
                        for r in resolved:
                            cell = Cell(task, alpha, seed, method, r)
                            if cell.key() in seen:
                                raise InvalidInputError(f"duplicate grid cell {cell.key()}")
                            seen.add(cell.key())
                            cells.append(cell)
    return cells


def _derived_seed(top_seed: int, *labels) -> int:
    return RngStream(top_seed).derive(*labels).stream_id


def build_bundle(cfg: GridConfig, task: GridTask, alpha: float | None, seed: int):
    """Materialize the task bundle for one (task, alpha, seed) coordinate.
    All methods and corrections at that coordinate share this bundle."""
    shift = ShiftSpec(
        alpha=alpha,
        epsilon=task.epsilon,
        seed=_derived_seed(cfg.seed, "shift", task.name, alpha, seed),
    )
    if task.synth is not None:
        spec = replace(
            task.synth,
            name=task.name,
            seed=_derived_seed(cfg.seed, "bundle", task.name, alpha, seed),
        )
        return synth_relaxed_task(spec, shift)
    base = Path(task.data_dir)
    source_pool = load_labeled_csv(base / "source.csv")
    target_pool = load_labeled_csv(base / "target.csv")
    k = int(max(source_pool.labels.max(), target_pool.labels.max())) + 1
    return apply_shift_protocol(task.name, k, source_pool, target_pool, shift)


def run_cell(cfg: GridConfig, cell: Cell) -> RunRecord:
    """Execute one cell; failures come back as records carrying the error
    string instead of metrics."""
    started = time.perf_counter()
    base = dict(
        task_id=cell.task.name,
        alpha=cell.alpha,
        seed=cell.seed,
        method=cell.method,
        corrections=cell.corrections.label(),
        estimator=cell.corrections.estimator,
    )
    try:
        bundle = build_bundle(cfg, cell.task, cell.alpha, cell.seed)
        train_cfg = replace(
            cfg.train,
            seed=_derived_seed(cfg.seed, "train", cell.task.name, cell.alpha,
                               cell.seed, cell.method),
        )
        spec = ModelSpec(cfg.model_kind, input_dim=bundle.d, classes=bundle.k,
                         hidden_units=cfg.hidden_units)
        result = meta_adapt(cell.method, bundle, cell.corrections, train_cfg,
                            model_spec=spec, pl=cfg.pseudolabel)
        test = bundle.target_test
        metrics = evaluate(result.adjusted(test.features), test.labels,
                           result.p_hat_t, bundle.true_target_marginal)
        val = bundle.source_val
        source_val_accuracy = evaluate(result.model.predict(val.features), val.labels).accuracy
        return RunRecord(
            **base,
            target_accuracy=metrics.accuracy,
            source_val_accuracy=source_val_accuracy,
            marginal_l1_error=metrics.marginal_l1_error,
            true_marginal=tuple(float(v) for v in bundle.true_target_marginal.probs),
            estimated_marginal=(tuple(float(v) for v in result.p_hat_t.probs)
                                if result.p_hat_t is not None else None),
            wall_time_seconds=time.perf_counter() - started,
        )
    except Exception as exc:  # the grid must survive any single cell
        return RunRecord(
            **base,
            wall_time_seconds=time.perf_counter() - started,
            error=f"{type(exc).__name__}: {exc}",
        )


def read_records(path) -> list[RunRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            try:
                records.append(RunRecord.from_json_dict(payload))
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return records


def _alpha_order(alpha):
    return (0, 0.0) if alpha is None else (1, -float(alpha))


def _record_order(record: RunRecord):
    return (record.task_id, _alpha_order(record.alpha), record.seed,
            record.method, record.corrections, record.estimator or "")


def run_grid(cfg: GridConfig, jobs: int = 1, resume: bool = False) -> list[RunRecord]:
    """Run every planned cell, appending each record to
    output_dir/results.jsonl as it completes through a single writer.

    With resume=True, cells whose coordinates already appear in the results
    file are skipped; without it, a nonempty results file is an error so runs
    never silently mix configurations.
    """
    if jobs < 1:
        raise InvalidInputError(f"jobs must be positive, got {jobs}")
    cells = plan_cells(cfg)
    out_dir = Path(cfg.output_dir)
    results_path = out_dir / RESULTS_FILENAME
    existing: list[RunRecord] = []
    if results_path.exists() and results_path.stat().st_size > 0:
        if not resume:
            raise InvalidInputError(
                f"{results_path} already contains records; rerun with resume "
                "or remove the file"
            )
        existing = read_records(results_path)
    planned_keys = {c.key() for c in cells}
    done_keys = {r.key() for r in existing}
    todo = [c for c in cells if c.key() not in done_keys]

    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for r in existing if r.key() in planned_keys]
    with open(results_path, "a") as fh:

        def emit(record: RunRecord) -> None:
            fh.write(json.dumps(record.to_json_dict()) + "\n")
            fh.flush()
            records.append(record)

        if jobs == 1 or len(todo) <= 1:
            for cell in todo:
                emit(run_cell(cfg, cell))
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(run_cell, cfg, cell) for cell in todo]
                for future in as_completed(futures):
                    emit(future.result())
    return sorted(records, key=_record_order)


def aggregate(records, baselines=None) -> list[Summary]:
    """Group successful records by (alpha, method, corrections, estimator)
    and summarize relative accuracy and marginal l1 error. Quartiles use
    linear interpolation between order statistics. Records that failed are
    skipped; a missing baseline is an error."""
    records = [r for r in records if r.error is None]
    if baselines is None:
        baselines = [r for r in records
                     if r.method == "source_only" and r.corrections == "none"]
    by_key = {}
    for b in baselines:
        key = (b.task_id, b.alpha, b.seed)
        if key in by_key:
            raise PairingError(f"duplicate baseline for cell {key}")
        by_key[key] = b

    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.alpha, r.method, r.corrections, r.estimator), []).append(r)

    summaries = []
    for (alpha, method, corrections, estimator), members in sorted(
        groups.items(),
        key=lambda item: (_alpha_order(item[0][0]), item[0][1], item[0][2],
                          item[0][3] or ""),
    ):
        rel = []
        for r in members:
            baseline = by_key.get((r.task_id, r.alpha, r.seed))
            if baseline is None:
                raise PairingError(
                    f"no uncorrected source_only baseline for cell {r.key()}"
                )
            rel.append(relative_accuracy(r, baseline))
        # Statistics run over sorted values so aggregation is bit-identical
        # under any permutation of the input records.
        rel = np.sort(np.asarray(rel))
        l1 = np.sort(np.asarray([r.marginal_l1_error for r in members
                                 if r.marginal_l1_error is not None]))
        summaries.append(Summary(
            alpha=alpha,
            method=method,
            corrections=corrections,
            estimator=estimator,
            n=len(members),
            mean_rel_acc=float(rel.mean()),
            median_rel_acc=float(np.median(rel)),
            q25=float(np.percentile(rel, 25)),
            q75=float(np.percentile(rel, 75)),
            mean_l1=float(l1.mean()) if l1.size else None,
            median_l1=float(np.median(l1)) if l1.size else None,
        ))
    return summaries


def write_summary_csv(path, summaries) -> None:
    """CSV with the fixed header; alpha None prints as "none", absent l1
    statistics as empty cells."""
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        writer = csv.writer(fh)
        for s in summaries:
            writer.writerow([
                "none" if s.alpha is None else repr(s.alpha),
                s.method,
                s.corrections,
                s.estimator or "",
                s.n,
                repr(s.mean_rel_acc),
                repr(s.median_rel_acc),
                repr(s.q25),
                repr(s.q75),
                "" if s.mean_l1 is None else repr(s.mean_l1),
                "" if s.median_l1 is None else repr(s.median_l1),
            ])


# ---------------------------------------------------------------------------
# Prediction dumps: the exchange format for externally produced classifier
# outputs (header p0,...,p{k-1} with an optional trailing y column).


def write_predictions(path, preds: PredictionMatrix, labels=None) -> None:
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (preds.n,):
            raise DimensionError(
                f"labels have shape {labels.shape}, predictions have {preds.n} rows"
            )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"p{j}" for j in range(preds.k)]
        if labels is not None:
            header.append("y")
        writer.writerow(header)
        for i, row in enumerate(preds.values):
            fields = [repr(float(v)) for v in row]
            if labels is not None:
                fields.append(int(labels[i]))
            writer.writerow(fields)


def ingest_predictions(path, normalize: bool = False):
    """Parse a prediction dump into (PredictionMatrix, labels or None).

    Row sums within 1e-3 of 1 are silently renormalized; larger deviations
    are an error unless normalize is set. All parse failures carry the
    offending line number.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        has_labels = bool(header) and header[-1] == "y"
        prob_cols = header[:-1] if has_labels else header
        expected = [f"p{j}" for j in range(len(prob_cols))]
        if len(prob_cols) < 2 or prob_cols != expected:
            raise ParseError(
                f"{path}:1: header must be p0,...,p{{k-1}} with optional trailing y"
            )
        k = len(prob_cols)
        rows = []
        labels = []
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}"
                )
            try:
                probs = [float(v) for v in fields[:k]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric probability") from None
            if any(not np.isfinite(p) for p in probs):
                raise ParseError(f"{path}:{lineno}: non-finite probability")
            if any(p < 0 for p in probs):
                raise ParseError(f"{path}:{lineno}: negative probability")
            total = sum(probs)
            if total <= 0:
                raise ParseError(f"{path}:{lineno}: probabilities sum to zero")
            if abs(total - 1.0) > 1e-3 and not normalize:
                raise ParseError(
                    f"{path}:{lineno}: probabilities sum to {total!r}; rerun with "
                    "normalization enabled to accept"
                )
            rows.append([p / total for p in probs])
            if has_labels:
                try:
                    label = int(fields[-1])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-integer label") from None
                if label < 0:
                    raise ParseError(f"{path}:{lineno}: negative label")
                labels.append(label)
        if not rows:
            raise ParseError(f"{path}: no data rows")
    matrix = PredictionMatrix(np.asarray(rows, dtype=np.float64))
    return matrix, (np.asarray(labels, dtype=np.int64) if has_labels else None)
