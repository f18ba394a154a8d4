"""Classifier training and label-shift corrections.

Two small float64 models (softmax regression and a one-hidden-layer tanh
network) trained by minibatch gradient descent with hand-derived gradients
and a safeguarded step size: whenever the full-train objective increases at
an epoch boundary, the epoch is rolled back and the learning rate halves, so
the recorded loss sequence is non-increasing by construction.

meta_adapt wraps any of the training algorithms with the two corrections:
class re-balancing of the training data (rs) and post-hoc re-weighting of the
predictions by an estimated target marginal (rw).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from labelshift.core import (
    DimensionError,
    DivergedError,
    EmptyInputError,
    InvalidInputError,
    LabelMarginal,
    LabelShiftError,
    LabeledSet,
    ParseError,
    PredictionMatrix,
    RngStream,
)
from labelshift.estimate import (
    EstimatorOutput,
    MllsConfig,
    RllsConfig,
    estimate_marginal,
)
from labelshift.shift import TaskBundle, _largest_remainder

ALGORITHMS = ("source_only", "pseudolabel", "iw_erm")
MODEL_KINDS = ("logistic", "mlp")

# Estimated marginals are clipped here and renormalized before re-weighting,
# so a single zeroed class cannot erase a prediction column.
MARGINAL_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int
    hidden_units: int = 32

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidInputError(f"unknown model kind {self.kind!r}; expected {MODEL_KINDS}")
        if self.input_dim < 1 or self.classes < 2 or self.hidden_units < 1:
            raise InvalidInputError("model dimensions must be positive (classes >= 2)")

    @property
    def n_parameters(self) -> int:
        d, k, h = self.input_dim, self.classes, self.hidden_units
        if self.kind == "logistic":
            return d * k + k
        return d * h + h + h * k + k


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.5
    l2: float = 1e-4
    seed: int = 0
    early_stop_on_source_val: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidInputError("learning_rate must be positive")
        if not (np.isfinite(self.l2) and self.l2 >= 0):
            raise InvalidInputError("l2 must be nonnegative")


@dataclass(frozen=True)
class PseudoLabelConfig:
    """Self-training term: confident argmax pseudo-labels enter the loss with
    weight ramping linearly from 0 to lambda_max over the first ramp_fraction
    of all steps, then staying constant."""

    tau: float = 0.9
    lambda_max: float = 1.0
    ramp_fraction: float = 0.4

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise InvalidInputError("tau must lie in (0, 1]")
        if self.lambda_max < 0:
            raise InvalidInputError("lambda_max must be nonnegative")
        if not (0.0 <= self.ramp_fraction <= 1.0):
            raise InvalidInputError("ramp_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class CorrectionFlags:
    """Which corrections to apply around a training algorithm.

    estimator names the marginal estimator and is meaningful only when
    reweight is set; None defers to the caller's default ("rlls").
    """

    resample: bool = False
    reweight: bool = False
    estimator: str | None = None

    def label(self) -> str:
        parts = [s for s, on in (("rs", self.resample), ("rw", self.reweight)) if on]
        return "+".join(parts) if parts else "none"

    @classmethod
    def from_label(cls, label: str, estimator: str | None = None) -> "CorrectionFlags":
        parts = set(label.split("+")) if label != "none" else set()
        unknown = parts - {"rs", "rw"}
        if unknown:
            raise InvalidInputError(f"unknown correction tokens {sorted(unknown)} in {label!r}")
        return cls(resample="rs" in parts, reweight="rw" in parts, estimator=estimator)


@dataclass(frozen=True, eq=False)
class Model:
    """A trained classifier: spec, flat parameter vector, the per-epoch
    source-validation accuracy log, and the safeguarded objective values
    (non-increasing by construction)."""

    spec: ModelSpec
    parameters: np.ndarray
    training_log: tuple[float, ...] = ()
    loss_log: tuple[float, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.parameters, dtype=np.float64)
        if p.shape != (self.spec.n_parameters,):
            raise DimensionError(
                f"expected {self.spec.n_parameters} parameters for {self.spec.kind}, got {p.shape}"
            )
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("parameters contain non-finite values")
        p = np.array(p, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "parameters", p)
        object.__setattr__(self, "training_log", tuple(float(v) for v in self.training_log))
        object.__setattr__(self, "loss_log", tuple(float(v) for v in self.loss_log))

    def predict(self, features) -> PredictionMatrix:
        probs, _ = _forward(self.spec, self.parameters, _check_features(self.spec, features))
        return PredictionMatrix(probs)

    def predict_labels(self, features) -> np.ndarray:
        return self.predict(features).argmax_labels()


@dataclass(frozen=True, eq=False)
class AdaptResult:
    """Output of meta_adapt: the trained model, the estimated target marginal
    (None when re-weighting was off or estimation failed), the estimator's raw
    output, and an adjusted prediction function with corrections applied."""

    model: Model
    p_hat_t: LabelMarginal | None
    adjusted: Callable[[np.ndarray], PredictionMatrix]
    estimate: EstimatorOutput | None = None
    diagnostics: tuple[str, ...] = ()


def _check_features(spec: ModelSpec, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"features must have shape (n, {spec.input_dim}), got {x.shape}")
    if x.shape[0] < 1:
        raise EmptyInputError("no feature rows")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features contain non-finite values")
    return x


def _unpack(spec: ModelSpec, params: np.ndarray):
    d, k, h = spec.input_dim, spec.classes, spec.hidden_units
    if spec.kind == "logistic":
        return params[: d * k].reshape(d, k), params[d * k :]
    i0 = d * h
    i1 = i0 + h
    i2 = i1 + h * k
    return (
        params[:i0].reshape(d, h),
        params[i0:i1],
        params[i1:i2].reshape(h, k),
        params[i2:],
    )


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    if spec.kind == "logistic":
        w, b = _unpack(spec, params)
        logits = x @ w + b
        hidden = None
    else:
        w1, b1, w2, b2 = _unpack(spec, params)
        hidden = np.tanh(x @ w1 + b1)
        logits = hidden @ w2 + b2
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    return probs, (z, hidden)


def init_parameters(spec: ModelSpec, stream: RngStream) -> np.ndarray:
    """Zero init for the convex model; scaled Gaussian weights (zero biases)
    for the network, drawn from the given stream."""
    if spec.kind == "logistic":
        return np.zeros(spec.n_parameters)
    gen = stream.generator()
    d, k, h = spec.input_dim, spec.classes, spec.hidden_units
    w1 = gen.standard_normal((d, h)) / np.sqrt(d)
    w2 = gen.standard_normal((h, k)) / np.sqrt(h)
    return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)])


def loss_and_grad(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    class_weights: np.ndarray | None = None,
    l2: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy plus (l2/2) * ||weights||^2 (biases exempt),
    with the analytic gradient in the flat parameter layout.

    class_weights, when given, is a length-k vector applied per example
    through its label: loss = (1/n) sum_i cw[y_i] * ce_i + penalty.
    """
    n = x.shape[0]
    cw = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    probs, (z, hidden) = _forward(spec, params, x)
    idx = np.arange(n)
    log_denom = np.log(np.exp(z).sum(axis=1))
    logp = z[idx, y] - log_denom
    data_loss = -float(cw @ logp) / n

    dlogits = probs * cw[:, None]
    dlogits[idx, y] -= cw
    dlogits /= n
    if spec.kind == "logistic":
        w, _ = _unpack(spec, params)
        gw = x.T @ dlogits + l2 * w
        gb = dlogits.sum(axis=0)
        grad = np.concatenate([gw.ravel(), gb])
        penalty = 0.5 * l2 * float((w * w).sum())
    else:
        w1, _, w2, _ = _unpack(spec, params)
        gw2 = hidden.T @ dlogits + l2 * w2
        gb2 = dlogits.sum(axis=0)
        dhidden = dlogits @ w2.T
        dz1 = dhidden * (1.0 - hidden * hidden)
        gw1 = x.T @ dz1 + l2 * w1
        gb1 = dz1.sum(axis=0)
        grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
        penalty = 0.5 * l2 * float((w1 * w1).sum() + (w2 * w2).sum())
    return data_loss + penalty, grad


def class_balanced_indices(labels, size: int, stream: RngStream) -> np.ndarray:
    """Sample `size` indices with replacement, class-uniform over nonempty
    classes: per-class counts come from largest-remainder allocation of
    size/m (so they differ by at most 1, ties favoring lower class index),
    then draws are uniform within each class."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("cannot balance an empty label vector")
    if size < 1:
        raise InvalidInputError(f"size must be positive, got {size}")
    classes = np.unique(labels)
    shares = _largest_remainder(size, np.full(classes.size, 1.0 / classes.size))
    gen = stream.generator()
    picks = []
    for cls, count in zip(classes, shares):
        if count == 0:
            continue
        pool = np.nonzero(labels == cls)[0]
        picks.append(gen.choice(pool, size=int(count), replace=True))
    return np.concatenate(picks)


def reweight_predictions(
    preds: PredictionMatrix,
    p_hat_t: LabelMarginal,
    p_train: LabelMarginal,
) -> PredictionMatrix:
    """Post-hoc prior correction: scale column j by p_hat_t(j) / p_train(j)
    and renormalize rows. p_train is the marginal the classifier was trained
    on (uniform after class-balanced training). Rows that would lose all mass
    are kept unchanged and reported via a warning."""
    if preds.k != p_hat_t.k or preds.k != p_train.k:
        raise DimensionError("predictions and marginals disagree on the number of classes")
    if np.any(p_train.probs <= 0):
        raise InvalidInputError("p_train must be strictly positive")
    ratio = p_hat_t.probs / p_train.probs
    scaled = preds.values * ratio
    mass = scaled.sum(axis=1)
    dead = mass <= 0
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} prediction rows have no mass under the estimated "
            "marginal and were left unchanged",
            RuntimeWarning,
            stacklevel=2,
        )
        scaled[dead] = preds.values[dead]
        mass[dead] = 1.0
    return PredictionMatrix(scaled / mass[:, None])


def _accuracy(spec: ModelSpec, params: np.ndarray, data: LabeledSet) -> float:
    probs, _ = _forward(spec, params, data.features)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def _batch_slices(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


class _Loop:
    """Shared epoch machinery so every algorithm runs byte-identical
    arithmetic for the parts it has in common with plain ERM."""

    def __init__(self, spec: ModelSpec, cfg: TrainConfig, val: LabeledSet):
        if val.d != spec.input_dim:
            raise DimensionError("validation features disagree with the model spec")
        self.spec = spec
        self.cfg = cfg
        self.val = val
        base = RngStream(cfg.seed)
        self.params = init_parameters(spec, base.derive("init"))
        self.shuffle_gen = base.derive("shuffle").generator()
        self.lr = cfg.learning_rate
        self.prev_loss = np.inf
        self.prev_params = self.params.copy()
        self.log: list[float] = []
        self.losses: list[float] = []
        self.best_acc = -np.inf
        self.best_params = self.params.copy()

    def epoch_order(self, n: int) -> np.ndarray:
        return self.shuffle_gen.permutation(n)

    def finish_epoch(self, full_loss: float) -> None:
        # Safeguard: reject the epoch and halve the step on any increase of
        # the monitored objective, so the recorded sequence never rises.
        if not np.isfinite(full_loss):
            raise DivergedError(f"training loss became {full_loss!r}")
        if full_loss > self.prev_loss:
            self.params = self.prev_params.copy()
            self.lr /= 2.0
        else:
            self.prev_params = self.params.copy()
            self.prev_loss = full_loss
        self.losses.append(self.prev_loss)
        acc = _accuracy(self.spec, self.params, self.val)
        self.log.append(acc)
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_params = self.params.copy()

    def result(self) -> Model:
        params = self.best_params if self.cfg.early_stop_on_source_val else self.params
        return Model(self.spec, params, tuple(self.log), tuple(self.losses))


def train_erm(
    spec: ModelSpec,
    train: LabeledSet,
    val: LabeledSet,
    cfg: TrainConfig,
    example_weights: np.ndarray | None = None,
) -> Model:
    """Minibatch gradient descent on the (optionally class-weighted)
    cross-entropy. example_weights is a length-k vector of per-class weights
    applied to each example through its label; None and all-ones produce
    bit-identical trajectories."""
    if train.d != spec.input_dim:
        raise DimensionError("training features disagree with the model spec")
    if train.labels.max() >= spec.classes:
        raise InvalidInputError(f"training labels exceed classes={spec.classes}")
    weights = np.ones(spec.classes) if example_weights is None else np.asarray(example_weights, dtype=np.float64)
    if weights.shape != (spec.classes,):
        raise DimensionError(f"example_weights must have length {spec.classes}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidInputError("example_weights must be finite and nonnegative")

    loop = _Loop(spec, cfg, val)
    x, y = train.features, train.labels
    for _ in range(cfg.epochs):
        order = loop.epoch_order(train.n)
        for sl in _batch_slices(train.n, cfg.batch_size):
            batch = order[sl]
            _, grad = loss_and_grad(spec, loop.params, x[batch], y[batch], weights, cfg.l2)
            loop.params = loop.params - loop.lr * grad
        full_loss, _ = loss_and_grad(spec, loop.params, x, y, weights, cfg.l2)
        loop.finish_epoch(full_loss)
    return loop.result()


def pseudolabel_train(
    spec: ModelSpec,
    source_train: LabeledSet,
    source_val: LabeledSet,
    target_features,
    cfg: TrainConfig,
    pl: PseudoLabelConfig = PseudoLabelConfig(),
    corrections: CorrectionFlags = CorrectionFlags(),
) -> Model:
    """Self-training: every step takes a labeled source batch plus a target
    batch whose confident argmax pseudo-labels enter the loss with the ramped
    weight. With corrections.resample, each epoch re-balances the source on
    true labels and the target on current pseudo-labels before sampling.

    The safeguard monitors the labeled source objective only; the pseudo-label
    term is nonstationary. With lambda_max = 0 the trajectory is bit-identical
    to train_erm under the same config.
    """
    if source_train.d != spec.input_dim:
        raise DimensionError("training features disagree with the model spec")
    if source_train.labels.max() >= spec.classes:
        raise InvalidInputError(f"training labels exceed classes={spec.classes}")
    target_x = _check_features(spec, target_features)
    weights = np.ones(spec.classes)

    loop = _Loop(spec, cfg, source_val)
    base = RngStream(cfg.seed)
    target_gen = base.derive("target_shuffle").generator()

    steps_per_epoch = int(np.ceil(source_train.n / cfg.batch_size))
    ramp_steps = pl.ramp_fraction * cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        if corrections.resample:
            src_idx = class_balanced_indices(
                source_train.labels, source_train.n, base.derive("balance_source", epoch)
            )
            probs_t, _ = _forward(spec, loop.params, target_x)
            pseudo_all = np.argmax(probs_t, axis=1)
            tgt_idx = class_balanced_indices(
                pseudo_all, target_x.shape[0], base.derive("balance_target", epoch)
            )
        else:
            src_idx = np.arange(source_train.n)
            tgt_idx = np.arange(target_x.shape[0])
        epoch_src = source_train.subset(src_idx)
        x, y = epoch_src.features, epoch_src.labels

        order = loop.epoch_order(epoch_src.n)
        target_order = target_gen.permutation(tgt_idx)
        for i, sl in enumerate(_batch_slices(epoch_src.n, cfg.batch_size)):
            batch = order[sl]
            _, grad = loss_and_grad(spec, loop.params, x[batch], y[batch], weights, cfg.l2)
            lam_t = pl.lambda_max * min(1.0, step / ramp_steps) if ramp_steps > 0 else pl.lambda_max
            if lam_t > 0.0:
                take = (np.arange(i * cfg.batch_size, i * cfg.batch_size + cfg.batch_size)
                        % target_order.size)
                tb = target_x[target_order[take]]
                probs_tb, _ = _forward(spec, loop.params, tb)
                confident = probs_tb.max(axis=1) >= pl.tau
                if confident.any():
                    pseudo = np.argmax(probs_tb[confident], axis=1)
                    _, ugrad = loss_and_grad(
                        spec, loop.params, tb[confident], pseudo, None, 0.0
                    )
                    # Mean over the full target batch, not just confident rows.
                    grad = grad + lam_t * (confident.sum() / tb.shape[0]) * ugrad
            loop.params = loop.params - loop.lr * grad
            step += 1
        full_loss, _ = loss_and_grad(spec, loop.params, x, y, weights, cfg.l2)
        loop.finish_epoch(full_loss)
    return loop.result()


def _default_weight_fn(
    preds_source: PredictionMatrix,
    labels_source: np.ndarray,
    preds_target: PredictionMatrix,
) -> np.ndarray:
    out = estimate_marginal(
        "rlls", preds_source, labels_source, preds_target, rlls_cfg=RllsConfig(lam=0.0)
    )
    return out.weights.weights


def iw_erm_train(
    spec: ModelSpec,
    source_train: LabeledSet,
    source_val: LabeledSet,
    target_features,
    cfg: TrainConfig,
    weight_fn: Callable[[PredictionMatrix, np.ndarray, PredictionMatrix], np.ndarray] | None = None,
) -> Model:
    """ERM whose per-class weights are re-estimated at the start of every
    epoch from the current model's source-train and target-train predictions
    (moment matching by default). A weight_fn returning all ones makes the
    trajectory bit-identical to train_erm."""
    if source_train.d != spec.input_dim:
        raise DimensionError("training features disagree with the model spec")
    if source_train.labels.max() >= spec.classes:
        raise InvalidInputError(f"training labels exceed classes={spec.classes}")
    target_x = _check_features(spec, target_features)
    if weight_fn is None:
        weight_fn = _default_weight_fn

    loop = _Loop(spec, cfg, source_val)
    x, y = source_train.features, source_train.labels
    weights = np.ones(spec.classes)
    for _ in range(cfg.epochs):
        try:
            probs_s, _ = _forward(spec, loop.params, x)
            probs_t, _ = _forward(spec, loop.params, target_x)
            weights = np.asarray(
                weight_fn(PredictionMatrix(probs_s), y, PredictionMatrix(probs_t)),
                dtype=np.float64,
            )
        except LabelShiftError as exc:
            warnings.warn(f"weight estimation failed, keeping previous weights: {exc}",
                          RuntimeWarning, stacklevel=2)
        order = loop.epoch_order(source_train.n)
        for sl in _batch_slices(source_train.n, cfg.batch_size):
            batch = order[sl]
            _, grad = loss_and_grad(spec, loop.params, x[batch], y[batch], weights, cfg.l2)
            loop.params = loop.params - loop.lr * grad
        full_loss, _ = loss_and_grad(spec, loop.params, x, y, weights, cfg.l2)
        loop.finish_epoch(full_loss)
    return loop.result()


def meta_adapt(
    algorithm: str,
    bundle: TaskBundle,
    corrections: CorrectionFlags,
    cfg: TrainConfig,
    model_spec: ModelSpec | None = None,
    pl: PseudoLabelConfig = PseudoLabelConfig(),
    rlls_cfg: RllsConfig = RllsConfig(),
    mlls_cfg: MllsConfig = MllsConfig(),
) -> AdaptResult:
    """Run a training algorithm inside the correction loop.

    With resample on, the source is class-balanced before training (the
    pseudo-label loop instead re-balances source and target every epoch), so
    the classifier sees a uniform prior. With reweight on, the target
    marginal is estimated from source-val predictions plus unlabeled
    target-holdout predictions, floored, and divided by the training prior to
    adjust predictions. Estimation failures leave the uncorrected model with
    a diagnostic."""
    if algorithm not in ALGORITHMS:
        raise InvalidInputError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if model_spec is None:
        model_spec = ModelSpec("logistic", input_dim=bundle.d, classes=bundle.k)

    source_train = bundle.source_train
    train_marginal = (
        LabelMarginal.uniform(bundle.k)
        if corrections.resample
        else LabelMarginal.from_labels(source_train.labels, bundle.k)
    )
    if corrections.resample and algorithm != "pseudolabel":
        idx = class_balanced_indices(
            source_train.labels, source_train.n, RngStream(cfg.seed).derive("balance_source")
        )
        source_train = source_train.subset(idx)

    if algorithm == "source_only":
        model = train_erm(model_spec, source_train, bundle.source_val, cfg)
    elif algorithm == "pseudolabel":
        model = pseudolabel_train(
            model_spec, source_train, bundle.source_val,
            bundle.target_train.features, cfg, pl, corrections,
        )
    else:
        model = iw_erm_train(
            model_spec, source_train, bundle.source_val,
            bundle.target_train.features, cfg,
        )

    p_hat: LabelMarginal | None = None
    estimate: EstimatorOutput | None = None
    diagnostics: tuple[str, ...] = ()
    if corrections.reweight:
        try:
            estimate = estimate_marginal(
                corrections.estimator or "rlls",
                model.predict(bundle.source_val.features),
                bundle.source_val.labels,
                model.predict(bundle.target_test.features),
                classifier_prior=train_marginal,
                rlls_cfg=rlls_cfg,
                mlls_cfg=mlls_cfg,
            )
            diagnostics = estimate.diagnostics
            floored = np.maximum(estimate.marginal.probs, MARGINAL_FLOOR)
            p_hat = LabelMarginal(floored / floored.sum())
        except LabelShiftError as exc:
            diagnostics = (f"marginal estimation failed: {exc}",)

    if p_hat is not None:
        marginal = p_hat

        def adjusted(features, _m=marginal, _t=train_marginal, _model=model):
            return reweight_predictions(_model.predict(features), _m, _t)
    else:
        def adjusted(features, _model=model):
            return _model.predict(features)

    return AdaptResult(
        model=model,
        p_hat_t=p_hat,
        adjusted=adjusted,
        estimate=estimate,
        diagnostics=diagnostics,
    )


def save_model(model: Model, path) -> None:
    """Serialize spec, parameters, and training log as JSON; floats round-trip
    exactly."""
    payload = {
        "kind": model.spec.kind,
        "input_dim": model.spec.input_dim,
        "classes": model.spec.classes,
        "hidden_units": model.spec.hidden_units,
        "parameters": model.parameters.tolist(),
        "training_log": list(model.training_log),
        "loss_log": list(model.loss_log),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    required = {"kind", "input_dim", "classes", "hidden_units", "parameters",
                "training_log", "loss_log"}
    if not isinstance(payload, dict) or set(payload) != required:
        raise ParseError(f"{path}: model file must contain exactly the keys {sorted(required)}")
    try:
        spec = ModelSpec(
            kind=payload["kind"],
            input_dim=int(payload["input_dim"]),
            classes=int(payload["classes"]),
            hidden_units=int(payload["hidden_units"]),
        )
        return Model(spec, np.asarray(payload["parameters"], dtype=np.float64),
                     tuple(payload["training_log"]), tuple(payload["loss_log"]))
    except (InvalidInputError, DimensionError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
