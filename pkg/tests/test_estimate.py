import numpy as np
import pytest

from labelshift.core import (
    DimensionError,
    ImportanceWeights,
    InvalidInputError,
    LabelMarginal,
    PredictionMatrix,
    l1_distance,
    weights_to_marginal,
)
from labelshift.estimate import (
    ESTIMATORS,
    MllsConfig,
    RllsConfig,
    baseline_estimate,
    estimate_marginal,
    mean_prediction,
    mlls_estimate,
    rlls_estimate,
    soft_confusion,
)


def random_instance(rng, k, n):
    # Diagonally dominant confusion from a synthetic "mostly right" classifier;
    # interior true weights so the linear-solve oracle applies.
    preds = rng.dirichlet(np.full(k, 0.3), size=n)
    labels = rng.integers(0, k, size=n)
    preds = 0.2 * preds
    preds[np.arange(n), labels] += 0.8
    pm = PredictionMatrix(preds)
    confusion = soft_confusion(pm, labels)
    p_s = LabelMarginal.from_labels(labels, k)
    w_true = rng.uniform(0.3, 2.0, size=k)
    w_true = w_true / (w_true @ p_s.probs)
    mu = confusion.matrix @ w_true
    return confusion, mu, p_s, w_true


class TestSoftConfusion:
    def test_worked_example(self):
        preds = PredictionMatrix(np.array([[0.8, 0.2], [0.6, 0.4]]))
        got = soft_confusion(preds, [0, 1])
        np.testing.assert_allclose(got.matrix, [[0.4, 0.3], [0.1, 0.2]], atol=1e-12)
        assert got.zero_classes == ()

    def test_column_sums_are_empirical_marginal(self):
        rng = np.random.default_rng(3)
        preds = PredictionMatrix(rng.dirichlet(np.ones(4), size=200))
        labels = rng.integers(0, 4, size=200)
        got = soft_confusion(preds, labels)
        np.testing.assert_allclose(
            got.column_sums(), np.bincount(labels, minlength=4) / 200, atol=1e-12
        )

    def test_missing_class_flagged_with_zero_column(self):
        preds = PredictionMatrix(np.array([[0.9, 0.05, 0.05], [0.2, 0.7, 0.1]]))
        got = soft_confusion(preds, [0, 0])
        assert got.zero_classes == (1, 2)
        np.testing.assert_array_equal(got.matrix[:, 1], 0.0)

    def test_label_range_checked(self):
        preds = PredictionMatrix(np.array([[0.5, 0.5]]))
        with pytest.raises(InvalidInputError):
            soft_confusion(preds, [2])
        with pytest.raises(DimensionError):
            soft_confusion(preds, [0, 1])


def test_mean_prediction_column_means():
    preds = PredictionMatrix(np.array([[0.6, 0.4], [0.2, 0.8]]))
    np.testing.assert_allclose(mean_prediction(preds).probs, [0.4, 0.6], atol=1e-12)
    np.testing.assert_allclose(baseline_estimate(preds).probs, [0.4, 0.6], atol=1e-12)


class TestRlls:
    def test_worked_example_unregularized(self):
        confusion = np.array([[0.45, 0.05], [0.05, 0.45]])
        mu = np.array([0.26, 0.74])
        p_s = LabelMarginal(np.array([0.5, 0.5]))
        res = rlls_estimate(confusion, mu, p_s, RllsConfig(lam=0.0))
        np.testing.assert_allclose(res.weights.weights, [0.4, 1.6], atol=1e-4)
        assert res.converged

    def test_diagonal_confusion(self):
        confusion = np.diag([0.5, 0.5])
        p_s = LabelMarginal(np.array([0.5, 0.5]))
        res = rlls_estimate(confusion, np.array([0.3, 0.7]), p_s, RllsConfig(lam=0.0))
        np.testing.assert_allclose(res.weights.weights, [0.6, 1.4], atol=1e-4)

    def test_huge_regularization_pins_unit_weights(self):
        confusion = np.array([[0.45, 0.05], [0.05, 0.45]])
        p_s = LabelMarginal(np.array([0.5, 0.5]))
        res = rlls_estimate(confusion, np.array([0.26, 0.74]), p_s, RllsConfig(lam=1e6))
        np.testing.assert_allclose(res.weights.weights, [1.0, 1.0], atol=1e-3)

    def test_output_always_feasible(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            k = int(rng.integers(2, 6))
            confusion, mu, p_s, _ = random_instance(rng, k, n=200)
            lam = float(rng.choice([0.0, 0.01, 1.0]))
            res = rlls_estimate(confusion, mu, p_s, RllsConfig(lam=lam))
            w = res.weights.weights
            assert np.all(w >= 0)
            assert w @ p_s.probs == pytest.approx(1.0, abs=1e-6)

    def test_matches_linear_solve_when_unregularized(self):
        rng = np.random.default_rng(23)
        for trial in range(10):
            confusion, mu, p_s, w_true = random_instance(rng, k=3, n=500)
            res = rlls_estimate(confusion, mu, p_s, RllsConfig(lam=0.0))
            oracle = np.linalg.solve(confusion.matrix, mu)
            np.testing.assert_allclose(res.weights.weights, oracle, atol=1e-3)
            np.testing.assert_allclose(oracle, w_true, atol=1e-9)

    def test_unsquared_variant_agrees_at_lam_zero(self):
        confusion = np.array([[0.45, 0.05], [0.05, 0.45]])
        p_s = LabelMarginal(np.array([0.5, 0.5]))
        res = rlls_estimate(
            confusion, np.array([0.26, 0.74]), p_s,
            RllsConfig(lam=0.0, squared_norms=False, max_iters=20000),
        )
        np.testing.assert_allclose(res.weights.weights, [0.4, 1.6], atol=5e-3)

    def test_zero_column_with_target_mass_is_ill_conditioned(self):
        confusion = np.array([[0.5, 0.0], [0.3, 0.0]])
        # No validation path here: raw matrix with a dead second class.
        p_s = LabelMarginal(np.array([0.8, 0.2]))
        res = rlls_estimate(confusion, np.array([0.5, 0.5]), p_s, RllsConfig(lam=0.1))
        assert res.ill_conditioned
        assert res.diagnostics
        assert np.all(res.weights.weights >= 0)

    def test_default_lam_uses_sample_count(self):
        rng = np.random.default_rng(5)
        confusion, mu, p_s, _ = random_instance(rng, k=2, n=400)
        res_default = rlls_estimate(confusion, mu, p_s, RllsConfig(), n_source_val=400)
        res_explicit = rlls_estimate(confusion, mu, p_s, RllsConfig(lam=1.0 / np.sqrt(400)))
        np.testing.assert_allclose(res_default.weights.weights, res_explicit.weights.weights)


class TestMlls:
    def test_worked_example_converges_to_vertex(self):
        # Pre-computed grid-search maximizer for this instance is [1, 0].
        preds = PredictionMatrix(np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]]))
        res = mlls_estimate(preds, LabelMarginal(np.array([0.5, 0.5])))
        np.testing.assert_allclose(res.marginal.probs, [1.0, 0.0], atol=1e-6)
        assert res.converged

    def test_one_hot_predictions_recover_their_marginal(self):
        preds = PredictionMatrix(np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]]))
        res = mlls_estimate(preds, LabelMarginal(np.array([0.5, 0.5])))
        np.testing.assert_allclose(res.marginal.probs, [0.75, 0.25], atol=1e-7)

    def test_log_likelihood_trace_is_monotone(self):
        rng = np.random.default_rng(17)
        for trial in range(20):
            k = int(rng.integers(2, 5))
            preds = PredictionMatrix(rng.dirichlet(np.full(k, 0.6), size=100))
            res = mlls_estimate(preds, LabelMarginal(rng.dirichlet(np.full(k, 4.0))))
            steps = np.diff(res.log_likelihoods)
            # EM ascends exactly in exact arithmetic; allow float rounding.
            assert steps.min() >= -1e-12

    def test_floor_flagged_on_impossible_rows(self):
        preds = PredictionMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        res = mlls_estimate(preds, LabelMarginal(np.array([0.0, 1.0])))
        assert res.floored
        np.testing.assert_allclose(res.marginal.probs, [0.0, 1.0], atol=1e-12)

    def test_zero_prior_classes_stay_zero(self):
        preds = PredictionMatrix(np.array([[0.6, 0.2, 0.2], [0.1, 0.6, 0.3]]))
        res = mlls_estimate(preds, LabelMarginal(np.array([0.5, 0.5, 0.0])))
        assert res.marginal.probs[2] == 0.0


class TestEstimateMarginal:
    def test_unknown_name_rejected(self):
        preds = PredictionMatrix(np.array([[0.5, 0.5]]))
        with pytest.raises(InvalidInputError, match="bbse"):
            estimate_marginal("bbse", preds, [0], preds)

    def test_perfect_one_hot_classifier_all_estimators(self):
        # Source: perfectly predicted labels with marginal [0.5, 0.5];
        # target: one-hot predictions with marginal [0.25, 0.75].
        src_labels = np.array([0, 1] * 50)
        eye = np.eye(2)
        preds_src = PredictionMatrix(eye[src_labels])
        tgt_labels = np.array([0] * 25 + [1] * 75)
        preds_tgt = PredictionMatrix(eye[tgt_labels])
        for name in ESTIMATORS:
            out = estimate_marginal(name, preds_src, src_labels, preds_tgt,
                                    rlls_cfg=RllsConfig(lam=0.0))
            np.testing.assert_allclose(out.marginal.probs, [0.25, 0.75], atol=1e-5)
            np.testing.assert_allclose(out.weights.weights, [0.5, 1.5], atol=1e-4)

    def test_estimators_share_output_shape(self):
        rng = np.random.default_rng(29)
        preds_src = PredictionMatrix(rng.dirichlet(np.ones(3), size=60))
        labels = rng.integers(0, 3, size=60)
        preds_tgt = PredictionMatrix(rng.dirichlet(np.ones(3), size=80))
        for name in ESTIMATORS:
            out = estimate_marginal(name, preds_src, labels, preds_tgt)
            assert out.estimator == name
            assert isinstance(out.marginal, LabelMarginal)
            assert isinstance(out.weights, ImportanceWeights)
            np.testing.assert_allclose(
                weights_to_marginal(out.weights, out.weights.reference).probs,
                out.marginal.probs,
                atol=1e-9,
            )

    def test_classifier_prior_feeds_mlls_only(self):
        rng = np.random.default_rng(31)
        preds_src = PredictionMatrix(rng.dirichlet(np.ones(2), size=40))
        labels = np.array([0] * 30 + [1] * 10)
        preds_tgt = PredictionMatrix(rng.dirichlet(np.ones(2), size=40))
        uniform = LabelMarginal.uniform(2)
        skewed = estimate_marginal("mlls", preds_src, labels, preds_tgt)
        balanced = estimate_marginal("mlls", preds_src, labels, preds_tgt,
                                     classifier_prior=uniform)
        assert l1_distance(skewed.marginal, balanced.marginal) > 1e-4
