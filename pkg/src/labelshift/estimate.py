"""Target label-marginal estimators.

Three interchangeable estimators, all black-box in the classifier:

* ``rlls``: regularized least squares on the soft confusion matrix, solved as
  projected gradient descent over the simplex.
* ``mlls``: maximum-likelihood via an EM fixed point on target predictions.
* ``baseline``: the mean target prediction, no correction for classifier error.

``estimate_marginal`` is the uniform entry point used by the adaptation loop
and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from labelshift.core import (
    DegenerateEstimateError,
    DimensionError,
    ImportanceWeights,
    InvalidInputError,
    LabelMarginal,
    PredictionMatrix,
    SoftConfusion,
    l1_distance,
    project_simplex,
    weights_to_marginal,
)

ESTIMATORS = ("rlls", "mlls", "baseline")

# Floor applied to EM denominators before taking logs.
MLLS_DENOMINATOR_FLOOR = 1e-12


@dataclass(frozen=True)
class RllsConfig:
    """Settings for the least-squares weight estimator.

    lam=None selects the rate default 1/sqrt(n) from the sample count attached
    to the confusion matrix (0 if the matrix carries no count). squared_norms
    picks the smooth least-squares objective; the unsquared subgradient
    variant sits behind the flag.
    """

    lam: float | None = None
    squared_norms: bool = True
    max_iters: int = 10000
    step_tolerance: float = 1e-10


@dataclass(frozen=True)
class MllsConfig:
    tol: float = 1e-8
    max_iters: int = 10000


@dataclass(frozen=True, eq=False)
class RllsResult:
    weights: ImportanceWeights
    converged: bool
    iterations: int
    objective: float
    ill_conditioned: bool = False
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class MllsResult:
    marginal: LabelMarginal
    converged: bool
    iterations: int
    # Mean log-likelihood per EM iterate, including the final one; length is
    # iterations + 1. Non-decreasing up to float rounding.
    log_likelihoods: tuple[float, ...] = ()
    floored: bool = False


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    """Common shape returned by estimate_marginal for all three estimators."""

    estimator: str
    marginal: LabelMarginal
    weights: ImportanceWeights
    converged: bool
    diagnostics: tuple[str, ...] = ()


def soft_confusion(preds: PredictionMatrix, labels) -> SoftConfusion:
    """Joint soft confusion C[i, j] = (1/n) sum_x f_i(x) 1{y(x) = j}.

    Column j sums to the empirical frequency of class j; a class with no
    examples yields an all-zero column and is reported in zero_classes.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != preds.n:
        raise DimensionError(
            f"got {labels.shape} labels for {preds.n} prediction rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= preds.k):
        raise InvalidInputError(f"labels must lie in [0, {preds.k})")
    labels = labels.astype(np.int64)
    onehot = np.zeros((preds.n, preds.k))
    onehot[np.arange(preds.n), labels] = 1.0
    matrix = preds.values.T @ onehot / preds.n
    counts = np.bincount(labels, minlength=preds.k)
    zero = tuple(int(j) for j in np.nonzero(counts == 0)[0])
    return SoftConfusion(matrix=matrix, zero_classes=zero)


def mean_prediction(preds: PredictionMatrix) -> LabelMarginal:
    """Column means of the prediction matrix; rows are stochastic so this is a marginal."""
    return LabelMarginal(preds.values.mean(axis=0))


def baseline_estimate(preds: PredictionMatrix) -> LabelMarginal:
    """Uncorrected estimate: read the target marginal off the mean prediction."""
    return mean_prediction(preds)


def _spectral_norm(m: np.ndarray) -> float:
    # Power iteration on a symmetric PSD matrix, deterministic start.
    v = np.full(m.shape[0], 1.0 / np.sqrt(m.shape[0]))
    lam = 0.0
    for _ in range(100):
        mv = m @ v
        norm = float(np.linalg.norm(mv))
        if norm == 0.0:
            return 0.0
        v = mv / norm
        lam = norm
    return lam


def _coerce_confusion(confusion) -> tuple[np.ndarray, tuple[int, ...]]:
    if isinstance(confusion, SoftConfusion):
        return confusion.matrix, confusion.zero_classes
    matrix = np.asarray(confusion, dtype=np.float64)
    zero = tuple(int(j) for j in np.nonzero(np.all(matrix == 0.0, axis=0))[0])
    return matrix, zero


def rlls_estimate(
    confusion,
    mu,
    p_s: LabelMarginal,
    cfg: RllsConfig = RllsConfig(),
    n_source_val: int | None = None,
) -> RllsResult:
    """Estimate importance weights from moments: find feasible w with C w ~ mu.

    The feasible set {w >= 0, sum_y w(y) p_s(y) = 1} maps to the probability
    simplex under q(y) = w(y) p_s(y), so the solver runs projected gradient
    descent in q with step size 1/L from a power-iteration bound. Classes with
    zero source mass stay pinned at q = 0; if target predictions still put
    mass there the problem is unidentifiable and the result is flagged
    ill-conditioned (best-effort weights are returned either way).
    """
    matrix, zero_cols = _coerce_confusion(confusion)
    mu_vec = mu.probs if isinstance(mu, LabelMarginal) else np.asarray(mu, dtype=np.float64)
    ps = p_s.probs
    k = ps.size
    if matrix.shape != (k, k):
        raise DimensionError(f"confusion shape {matrix.shape} does not match k={k}")
    if mu_vec.size != k:
        raise DimensionError(f"mu has {mu_vec.size} entries for k={k}")

    lam = cfg.lam
    if lam is None:
        lam = 1.0 / np.sqrt(n_source_val) if n_source_val else 0.0
    if lam < 0:
        raise InvalidInputError("lam must be nonnegative")

    diagnostics: list[str] = []
    support = ps > 0
    dead = sorted(set(np.nonzero(~support)[0].tolist()) | set(zero_cols))
    ill = bool(any(mu_vec[j] > 0 and (j in zero_cols or not support[j]) for j in range(k)))
    if ill:
        diagnostics.append(
            "ill-conditioned: target predictions put mass on classes with no "
            f"source support {dead}"
        )
    # Optimize only over classes the source can ever produce.
    active = np.nonzero(support)[0]
    a_mat = matrix[:, active] / ps[active][None, :]
    d_inv = 1.0 / ps[active]

    def objective(q: np.ndarray) -> float:
        resid = a_mat @ q - mu_vec
        reg = d_inv * q - 1.0
        if cfg.squared_norms:
            return float(resid @ resid + lam * (reg @ reg))
        return float(np.linalg.norm(resid) + lam * np.linalg.norm(reg))

    q = ps[active].copy()
    converged = False
    iterations = 0
    if cfg.squared_norms:
        hess = a_mat.T @ a_mat + lam * np.diag(d_inv**2)
        lipschitz = 2.0 * _spectral_norm(hess) * 1.05
        if lipschitz == 0.0:
            diagnostics.append("degenerate problem: zero curvature, returning w = 1")
            converged = True
        else:
            step = 1.0 / lipschitz
            for iterations in range(1, cfg.max_iters + 1):
                grad = 2.0 * (a_mat.T @ (a_mat @ q - mu_vec)) + 2.0 * lam * d_inv * (d_inv * q - 1.0)
                q_next = project_simplex(q - step * grad)
                moved = float(np.abs(q_next - q).sum())
                q = q_next
                if moved < cfg.step_tolerance:
                    converged = True
                    break
    else:
        # Projected subgradient with diminishing steps; tracks the best iterate.
        scale = _spectral_norm(a_mat.T @ a_mat) ** 0.5 + lam * float(d_inv.max())
        step0 = 1.0 / max(scale, 1e-12)
        best_q, best_obj = q.copy(), objective(q)
        for iterations in range(1, cfg.max_iters + 1):
            resid = a_mat @ q - mu_vec
            rn = float(np.linalg.norm(resid))
            grad = a_mat.T @ resid / rn if rn > 1e-15 else np.zeros_like(q)
            reg = d_inv * q - 1.0
            gn = float(np.linalg.norm(reg))
            if lam > 0 and gn > 1e-15:
                grad = grad + lam * d_inv * reg / gn
            q_next = project_simplex(q - step0 / np.sqrt(iterations) * grad)
            moved = float(np.abs(q_next - q).sum())
            q = q_next
            obj = objective(q)
            if obj < best_obj:
                best_obj, best_q = obj, q.copy()
            if moved < cfg.step_tolerance:
                converged = True
                break
        q = best_q
    if not converged:
        diagnostics.append(f"did not converge within {cfg.max_iters} iterations")

    w = np.zeros(k)
    w[active] = q / ps[active]
    return RllsResult(
        weights=ImportanceWeights(w, p_s),
        converged=converged,
        iterations=iterations,
        objective=objective(q),
        ill_conditioned=ill,
        diagnostics=tuple(diagnostics),
    )


def mlls_estimate(
    preds_target: PredictionMatrix,
    p_s: LabelMarginal,
    cfg: MllsConfig = MllsConfig(),
) -> MllsResult:
    """Maximum-likelihood marginal via the EM fixed point.

    Iterates p(y) <- mean over target examples of the reweighted posterior
    (p(y)/p_s(y)) f_y(x) / sum_y' (p(y')/p_s(y')) f_y'(x), starting from p_s,
    until the l1 change drops below cfg.tol. The mean log-likelihood trace is
    recorded per iterate and is non-decreasing (EM ascent). Consistency
    assumes approximately calibrated predictions. Classes with p_s(y) = 0
    have undefined ratios and stay pinned at 0.
    """
    if preds_target.k != p_s.k:
        raise DimensionError(f"predictions have k={preds_target.k}, marginal k={p_s.k}")
    values = preds_target.values
    ps = p_s.probs
    support = ps > 0
    inv_ps = np.where(support, 1.0 / np.where(support, ps, 1.0), 0.0)

    p = ps.copy()
    lls: list[float] = []
    floored = False
    converged = False
    iterations = 0

    def mean_ll(pvec: np.ndarray) -> tuple[float, np.ndarray]:
        weighted = values * (pvec * inv_ps)
        denom = weighted.sum(axis=1)
        nonlocal floored
        if denom.min() < MLLS_DENOMINATOR_FLOOR:
            floored = True
        denom = np.maximum(denom, MLLS_DENOMINATOR_FLOOR)
        return float(np.log(denom).mean()), weighted / denom[:, None]

    for iterations in range(1, cfg.max_iters + 1):
        ll, posterior = mean_ll(p)
        lls.append(ll)
        p_next = posterior.mean(axis=0)
        # Flooring can leak mass from all-zero posteriors; exact EM sums to 1.
        total = p_next.sum()
        if total <= 0:
            raise DegenerateEstimateError("EM posterior collapsed to zero mass")
        p_next = p_next / total
        delta = float(np.abs(p_next - p).sum())
        p = p_next
        if delta < cfg.tol:
            converged = True
            break
    lls.append(mean_ll(p)[0])

    return MllsResult(
        marginal=LabelMarginal(p),
        converged=converged,
        iterations=iterations,
        log_likelihoods=tuple(lls),
        floored=floored,
    )


def _weights_from_marginal(marginal: LabelMarginal, p_s: LabelMarginal) -> ImportanceWeights:
    # Ratio estimate w = p_t / p_s restricted to the source support; target
    # mass on unsupported classes is dropped and the rest renormalized.
    sup = p_s.probs > 0
    mass = float(marginal.probs[sup].sum())
    if mass <= 0:
        raise DegenerateEstimateError("estimated marginal has no mass on source-supported classes")
    w = np.zeros(p_s.k)
    w[sup] = (marginal.probs[sup] / mass) / p_s.probs[sup]
    return ImportanceWeights(w, p_s)


def estimate_marginal(
    estimator: str,
    preds_source_val: PredictionMatrix,
    labels_source_val,
    preds_target: PredictionMatrix,
    p_s: LabelMarginal | None = None,
    classifier_prior: LabelMarginal | None = None,
    rlls_cfg: RllsConfig = RllsConfig(),
    mlls_cfg: MllsConfig = MllsConfig(),
) -> EstimatorOutput:
    """Run one of the named estimators and return marginal plus weights.

    p_s defaults to the empirical marginal of the source validation labels.
    classifier_prior is the label marginal the classifier was trained on
    (uniform when training was class-balanced); it only affects mlls, whose
    ratio p(y)/prior(y) refers to the training prior. rlls and baseline are
    prior-free in the classifier.
    """
    if estimator not in ESTIMATORS:
        raise InvalidInputError(
            f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}"
        )
    if preds_source_val.k != preds_target.k:
        raise DimensionError(
            f"source predictions have k={preds_source_val.k}, target k={preds_target.k}"
        )
    if p_s is None:
        p_s = LabelMarginal.from_labels(labels_source_val, preds_source_val.k)
    if classifier_prior is None:
        classifier_prior = p_s

    if estimator == "rlls":
        confusion = soft_confusion(preds_source_val, labels_source_val)
        mu = mean_prediction(preds_target)
        res = rlls_estimate(confusion, mu, p_s, rlls_cfg, n_source_val=preds_source_val.n)
        marginal = weights_to_marginal(res.weights, p_s)
        return EstimatorOutput(
            estimator="rlls",
            marginal=marginal,
            weights=res.weights,
            converged=res.converged,
            diagnostics=res.diagnostics,
        )
    if estimator == "mlls":
        res = mlls_estimate(preds_target, classifier_prior, mlls_cfg)
        diagnostics: tuple[str, ...] = ()
        if res.floored:
            diagnostics = ("EM denominators hit the numerical floor",)
        if not res.converged:
            diagnostics = diagnostics + (
                f"EM did not converge within {mlls_cfg.max_iters} iterations",
            )
        return EstimatorOutput(
            estimator="mlls",
            marginal=res.marginal,
            weights=_weights_from_marginal(res.marginal, p_s),
            converged=res.converged,
            diagnostics=diagnostics,
        )
    marginal = baseline_estimate(preds_target)
    return EstimatorOutput(
        estimator="baseline",
        marginal=marginal,
        weights=_weights_from_marginal(marginal, p_s),
        converged=True,
        diagnostics=(),
    )
