"""Label-marginal estimation, classifier correction, and a relaxed label shift benchmark."""

from labelshift.adapt import (
    ALGORITHMS,
    MODEL_KINDS,
    AdaptResult,
    CorrectionFlags,
    Model,
    ModelSpec,
    PseudoLabelConfig,
    TrainConfig,
    class_balanced_indices,
    iw_erm_train,
    load_model,
    loss_and_grad,
    meta_adapt,
    pseudolabel_train,
    reweight_predictions,
    save_model,
    train_erm,
)
from labelshift.bench import (
    Cell,
    EvalMetrics,
    GridConfig,
    GridTask,
    RunRecord,
    Summary,
    aggregate,
    build_bundle,
    evaluate,
    ingest_predictions,
    plan_cells,
    read_records,
    relative_accuracy,
    run_cell,
    run_grid,
    write_predictions,
    write_summary_csv,
)
from labelshift.cli import main
from labelshift.core import (
    DegenerateEstimateError,
    DimensionError,
    DivergedError,
    EmptyInputError,
    ImportanceWeights,
    InfeasibleMarginalError,
    InvalidInputError,
    LabelMarginal,
    LabelShiftError,
    LabeledSet,
    PairingError,
    ParseError,
    PredictionMatrix,
    RngStream,
    SoftConfusion,
    l1_distance,
    project_simplex,
    weights_to_marginal,
)
from labelshift.estimate import (
    ESTIMATORS,
    EstimatorOutput,
    MllsConfig,
    MllsResult,
    RllsConfig,
    RllsResult,
    baseline_estimate,
    estimate_marginal,
    mean_prediction,
    mlls_estimate,
    rlls_estimate,
    soft_confusion,
)
from labelshift.shift import (
    ShiftSpec,
    SynthTaskSpec,
    TaskBundle,
    apply_shift_protocol,
    bayes_predictions,
    class_means,
    conditional_shift_deltas,
    dirichlet_marginal,
    load_bundle,
    load_labeled_csv,
    realize_marginal,
    save_bundle,
    save_labeled_csv,
    split_holdout,
    synth_relaxed_task,
)

__version__ = "0.1.0"
