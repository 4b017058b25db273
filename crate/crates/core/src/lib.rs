//! Online nonparametric intensity estimation with kernel mirror descent.
//!
//! The crate is organised bottom-up: kernels and dictionaries, sparse dual
//! functions, greedy kernel orthogonal matching pursuit for compression, loss
//! models, optimizers, data generation and the experiment harness.

// `!(x > 0.0)` style guards deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod komp;
pub mod models;
pub mod optimizers;
pub mod rkhs;

pub use data::{
    load_points_csv, make_multiclass_blobs, sample_inhomogeneous_ppp, simulate_toy, toy_ground_truth_density,
    train_test_split, write_points_csv, CsvOptions, Origin, PointStream,
};
pub use error::{Error, Result};
pub use harness::{
    compute_klr_test_loss, compute_rmse, compute_test_loss, evaluate_checkpoint, evaluation_grid, klr_error_rate,
    positivity_audit, read_metrics_csv, run_experiment, run_sweep, write_metrics_csv, Algorithm, BudgetConfig,
    DatasetConfig, Estimate, Evaluation, ExperimentConfig, GridConfig, MetricsRecord, PositivityAudit, RunOutput,
    RunSummary, SweepConfig, SweepResult,
};
pub use kernel::{cross_gram, gram_matrix, kernel_vector, silverman_bandwidth, Dictionary, Kernel};
pub use komp::{komp_prune, komp_prune_weights, removal_residual, BudgetPolicy, Pruned};
pub use models::{
    klr_gradient, klr_loss, klr_predict, poisson_empirical_risk, poisson_loss, poisson_pseudo_gradient_functional,
    poisson_pseudo_gradient_weights, pseudo_gradient_alignment_quadrature, verify_pseudo_gradient_property, GridSpec,
    GridTerm, KlrModel, LabeledPoint, Objective, PoissonModel, PseudoGradient,
};
pub use optimizers::{
    dual_averaging_step, hybrid_run, pmd_step, polk_step, quasi_newton_step, spppot_step, Checkpoint,
    DualAveragingState, HessianState, HybridOutcome, HybridSettings, HybridState, HybridStep, QuasiNewtonState,
    RngState, SpppotState, StepReport, StepSchedule,
};
pub use rkhs::{
    bregman_divergence, expansion_norm_diff, merge_functions, rkhs_norm_diff, DualFunction, Expansion, MirrorMap,
};
