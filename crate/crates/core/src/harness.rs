//! Experiment configuration, metrics and run orchestration.
//!
//! A run is described by an [`ExperimentConfig`] (JSON). [`run_experiment`]
//! prepares the data, builds the optimizer named by `algorithm`, streams
//! shuffled minibatches for the requested number of epochs and returns the
//! metric rows, a summary and a resumable checkpoint of the final state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_points_csv, make_multiclass_blobs, simulate_toy, toy_ground_truth_density, train_test_split, CsvOptions,
    PointStream,
};
use crate::error::{Error, Result};
use crate::kernel::{silverman_bandwidth, Dictionary, Kernel};
use crate::komp::BudgetPolicy;
use crate::models::{klr_loss, klr_predict, poisson_empirical_risk, GridSpec, KlrModel, LabeledPoint, PoissonModel};
use crate::optimizers::{
    dual_averaging_step, pmd_step, polk_step, quasi_newton_step, spppot_step, Checkpoint, DualAveragingState,
    ExpansionRepr, HybridSettings, HybridState, HybridStep, QuasiNewtonState, SpppotState, StepSchedule,
    DEFAULT_NEWTON_INIT, DEFAULT_STABILITY_WINDOW,
};
use crate::rkhs::{DualFunction, Expansion, MirrorMap};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "samples_processed",
    "train_loss",
    "test_loss",
    "model_order",
    "rmse",
    "wall_time_ms",
];

/// Points in the audit / RMSE evaluation grid.
pub const EVAL_GRID_POINTS: usize = 1001;

/// Tolerance used when flagging invariant violations in the summary.
pub const INVARIANT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Spppot,
    Polk,
    Pmd,
    QuasiNewton,
    Hybrid,
    DualAveraging,
    KlrSpppot,
}

impl Algorithm {
    fn is_poisson(self) -> bool {
        self != Algorithm::KlrSpppot
    }

    fn compresses(self) -> bool {
        !matches!(self, Algorithm::Pmd | Algorithm::QuasiNewton)
    }

    fn second_order(self) -> bool {
        matches!(self, Algorithm::QuasiNewton | Algorithm::Hybrid)
    }
}

/// Budget section of a config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BudgetConfig {
    Constant {
        epsilon: f64,
    },
    Adaptive {
        alpha0: f64,
        target_order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha_min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha_max: Option<f64>,
    },
}

impl BudgetConfig {
    pub fn policy(&self) -> Result<BudgetPolicy> {
        match *self {
            BudgetConfig::Constant { epsilon } => {
                BudgetPolicy::constant(epsilon).map_err(|e| Error::config("budget.epsilon", e.to_string()))
            }
            BudgetConfig::Adaptive {
                alpha0,
                target_order,
                alpha_min,
                alpha_max,
            } => {
                let mut p = BudgetPolicy::adaptive(alpha0, target_order)
                    .map_err(|e| Error::config("budget.alpha0", e.to_string()))?;
                if let BudgetPolicy::Adaptive {
                    alpha_min: lo,
                    alpha_max: hi,
                    ..
                } = &mut p
                {
                    *lo = alpha_min.unwrap_or(*lo);
                    *hi = alpha_max.unwrap_or(*hi);
                    if !(*lo > 0.0 && *lo <= alpha0 && alpha0 <= *hi) {
                        return Err(Error::config("budget", "need 0 < alpha_min <= alpha0 <= alpha_max"));
                    }
                }
                Ok(p)
            }
        }
    }
}

fn default_expected() -> f64 {
    10211.0
}
fn default_test_expected() -> f64 {
    1001.0
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_blob_dim() -> usize {
    2
}
fn default_separation() -> f64 {
    4.0
}
fn default_blob_test_fraction() -> f64 {
    0.2
}

/// Where the training and test points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Normal(0.5, 0.1) intensity on `[0, 1]`; the test set is a fresh draw.
    Toy {
        #[serde(default = "default_expected")]
        expected: f64,
        #[serde(default = "default_test_expected")]
        test_expected: f64,
        /// Training draw seed (test uses `seed + 1`); defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Points from a CSV file, with a seeded holdout unless `test_path` is set.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default)]
        normalize: bool,
        #[serde(default)]
        labeled: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Labeled Gaussian blobs with a seeded holdout.
    Blobs {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_blob_test_fraction")]
        test_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl DatasetConfig {
    fn labeled(&self) -> bool {
        match self {
            DatasetConfig::Toy { .. } => false,
            DatasetConfig::Csv { labeled, .. } => *labeled,
            DatasetConfig::Blobs { .. } => true,
        }
    }
}

/// Quadrature grid; `bounds` default to the data domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// One entry per dimension, or a single entry used for every dimension.
    pub points_per_dim: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<(f64, f64)>>,
}

fn default_batch() -> usize {
    30
}
fn default_newton_batch() -> usize {
    1
}
fn default_window() -> usize {
    DEFAULT_STABILITY_WINDOW
}
fn default_record_every() -> usize {
    10
}
fn default_train_eval() -> usize {
    1000
}

/// One experiment. Field presence is checked per algorithm by [`ExperimentConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub algorithm: Algorithm,
    /// Falls back to Silverman's rule on the training points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    /// Functional step size, or the weight-space step size for `pmd` and `quasi_newton`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Quasi-Newton step size of the hybrid's second phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_newton: Option<f64>,
    /// Weight-space schedule; overrides the constant weight-space step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetConfig>,
    /// Minibatch of functional steps and of `pmd`.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Minibatch of quasi-Newton steps.
    #[serde(default = "default_newton_batch")]
    pub newton_batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Initial grid weight for weight-space methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_weight: Option<f64>,
    #[serde(default = "default_window")]
    pub stability_window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positivity_floor: Option<f64>,
    /// Seeds the minibatch shuffle and, unless overridden, the dataset.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Size of the fixed training subset used for `train_loss`.
    #[serde(default = "default_train_eval")]
    pub train_eval_size: usize,
    /// Record wall-clock time; off keeps `metrics.csv` bit-reproducible.
    #[serde(default)]
    pub timing: bool,
}

fn positive(field: &str, v: Option<f64>) -> Result<f64> {
    match v {
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(Error::config(field, format!("must be positive and finite, got {x}"))),
        None => Err(Error::config(field, "required for this algorithm")),
    }
}

fn absent<T>(field: &str, v: &Option<T>, algo: Algorithm) -> Result<()> {
    if v.is_some() {
        return Err(Error::config(field, format!("not used by {algo:?}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Make relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Csv { path, test_path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(t) = test_path {
                if t.is_relative() {
                    *t = base.join(&*t);
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Whether the algorithm fits an intensity (as opposed to a classifier).
    pub fn is_point_process(&self) -> bool {
        self.algorithm.is_poisson()
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            serde_json::to_value(self.algorithm)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.algorithm;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.newton_batch_size == 0 {
            return Err(Error::config("newton_batch_size", "must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every", "must be >= 1"));
        }
        if self.train_eval_size == 0 {
            return Err(Error::config("train_eval_size", "must be >= 1"));
        }
        if let Some(s) = &self.schedule {
            let ok = match *s {
                StepSchedule::Constant { eta } => eta > 0.0 && eta.is_finite(),
                StepSchedule::Diminishing { cap, scale } => cap > 0.0 && cap.is_finite() && scale > 0.0,
            };
            if !ok {
                return Err(Error::config("schedule", "step sizes must be positive and finite"));
            }
        }
        if let Some(b) = &self.budget {
            b.policy()?;
        }
        if let Some(f) = self.positivity_floor {
            positive("positivity_floor", Some(f))?;
        }
        match a {
            Algorithm::Spppot | Algorithm::Polk | Algorithm::DualAveraging | Algorithm::KlrSpppot => {
                positive("eta", self.eta)?;
                if self.budget.is_none() {
                    return Err(Error::config("budget", "required for this algorithm"));
                }
                absent("delta", &self.delta, a)?;
                absent("eta_newton", &self.eta_newton, a)?;
                absent("schedule", &self.schedule, a)?;
                absent("init_weight", &self.init_weight, a)?;
            }
            Algorithm::Pmd | Algorithm::QuasiNewton => {
                if self.schedule.is_none() {
                    positive("eta", self.eta)?;
                }
                absent("budget", &self.budget, a)?;
                absent("eta_newton", &self.eta_newton, a)?;
                if a == Algorithm::QuasiNewton {
                    positive("delta", self.delta)?;
                } else {
                    absent("delta", &self.delta, a)?;
                }
            }
            Algorithm::Hybrid => {
                positive("eta", self.eta)?;
                if self.schedule.is_none() {
                    positive("eta_newton", self.eta_newton)?;
                }
                positive("delta", self.delta)?;
                if self.budget.is_none() {
                    return Err(Error::config("budget", "required for this algorithm"));
                }
                if self.stability_window == 0 {
                    return Err(Error::config("stability_window", "must be >= 1"));
                }
                absent("init_weight", &self.init_weight, a)?;
            }
        }
        if a.is_poisson() {
            let g = self
                .grid
                .as_ref()
                .ok_or_else(|| Error::config("grid", "required for point-process algorithms"))?;
            if g.points_per_dim.is_empty() || g.points_per_dim.contains(&0) {
                return Err(Error::config("grid.points_per_dim", "entries must be >= 1"));
            }
            if self.dataset.labeled() {
                return Err(Error::config(
                    "dataset",
                    "point-process algorithms take unlabeled points",
                ));
            }
        } else {
            absent("grid", &self.grid, a)?;
            absent("positivity_floor", &self.positivity_floor, a)?;
            if !self.dataset.labeled() {
                return Err(Error::config("dataset", "classification needs labeled points"));
            }
        }
        if let DatasetConfig::Toy {
            expected,
            test_expected,
            ..
        } = self.dataset
        {
            if !(expected > 0.0 && test_expected > 0.0) {
                return Err(Error::config("dataset.expected", "expected counts must be positive"));
            }
        }
        Ok(())
    }

    fn weight_schedule(&self, eta: Option<f64>) -> Result<StepSchedule> {
        match self.schedule {
            Some(s) => Ok(s),
            None => Ok(StepSchedule::Constant {
                eta: positive("eta", eta)?,
            }),
        }
    }
}

/// Train and test streams plus the known truth, if any.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: PointStream,
    pub test: PointStream,
    pub truth: Option<fn(&[f64]) -> f64>,
}

fn toy_truth(x: &[f64]) -> f64 {
    toy_ground_truth_density(x[0])
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let data = match &cfg.dataset {
        DatasetConfig::Toy {
            expected,
            test_expected,
            seed,
        } => {
            let s = seed.unwrap_or(cfg.seed);
            PreparedData {
                train: simulate_toy(*expected, s)?,
                test: simulate_toy(*test_expected, s.wrapping_add(1))?,
                truth: Some(toy_truth),
            }
        }
        DatasetConfig::Csv {
            path,
            test_path,
            normalize,
            labeled,
            test_fraction,
        } => {
            let opts = CsvOptions {
                normalize: *normalize,
                labeled: *labeled,
            };
            let all = load_points_csv(path, opts)?;
            let (train, test) = match test_path {
                Some(t) => (all, load_points_csv(t, opts)?),
                None => train_test_split(&all, *test_fraction, cfg.seed)?,
            };
            PreparedData {
                train,
                test,
                truth: None,
            }
        }
        DatasetConfig::Blobs {
            classes,
            per_class,
            dim,
            separation,
            test_fraction,
            seed,
        } => {
            let s = seed.unwrap_or(cfg.seed);
            let all = make_multiclass_blobs(*classes, *per_class, *dim, *separation, s)?;
            let (train, test) = train_test_split(&all, *test_fraction, s)?;
            PreparedData {
                train,
                test,
                truth: None,
            }
        }
    };
    if data.train.is_empty() {
        return Err(Error::Data {
            line: 0,
            message: "training set is empty".into(),
        });
    }
    if data.test.is_empty() {
        return Err(Error::Data {
            line: 0,
            message: "test set is empty".into(),
        });
    }
    Ok(data)
}

/// The configured kernel, or a Gaussian with the Silverman bandwidth averaged
/// over coordinates.
pub fn resolve_kernel(cfg: &ExperimentConfig, train: &PointStream) -> Result<Kernel> {
    if let Some(k) = cfg.kernel {
        return Ok(k);
    }
    let d = train.dim();
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = train.points.iter().map(|p| p[j]).collect();
        total += silverman_bandwidth(&col).map_err(|e| Error::config("kernel", e.to_string()))?;
    }
    Kernel::gaussian(total / d as f64)
}

/// The point-process model of a Poisson config over `domain` (used when the
/// grid has no explicit bounds).
pub fn poisson_model(cfg: &ExperimentConfig, domain: &[(f64, f64)]) -> Result<PoissonModel> {
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::config("grid", "required for point-process algorithms"))?;
    let bounds = g.bounds.clone().unwrap_or_else(|| domain.to_vec());
    let points_per_dim = match g.points_per_dim.as_slice() {
        [n] => vec![*n; bounds.len()],
        v => v.to_vec(),
    };
    let model =
        PoissonModel::new(&GridSpec { bounds, points_per_dim }).map_err(|e| Error::config("grid", e.to_string()))?;
    match cfg.positivity_floor {
        Some(f) => model.with_positivity_floor(f),
        None => Ok(model),
    }
}

/// Evenly spaced evaluation points over a box, about `total` of them
/// (exactly `total` in one dimension, endpoints included).
pub fn evaluation_grid(bounds: &[(f64, f64)], total: usize) -> Vec<Vec<f64>> {
    let d = bounds.len();
    if d == 0 || total == 0 {
        return Vec::new();
    }
    let per = ((total as f64).powf(1.0 / d as f64).round() as usize).max(2);
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| (0..per).map(|i| lo + (hi - lo) * i as f64 / (per - 1) as f64).collect())
        .collect();
    let mut out = vec![Vec::with_capacity(d)];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Root-mean-square error of the primal estimate against `truth` over `eval_grid`.
pub fn compute_rmse(estimate: &DualFunction, truth: impl Fn(&[f64]) -> f64, eval_grid: &[Vec<f64>]) -> Result<f64> {
    if eval_grid.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    let mut acc = 0.0;
    for x in eval_grid {
        estimate.dict.check_point(x)?;
        let e = estimate.primal_clamped(x).0 - truth(x);
        acc += e * e;
    }
    Ok((acc / eval_grid.len() as f64).sqrt())
}

/// Mean point-process loss over the test points. A signed estimate is scored
/// through the floored log and the positive part of its integral.
pub fn compute_test_loss(estimate: &DualFunction, model: &PoissonModel, test_points: &[Vec<f64>]) -> Result<f64> {
    poisson_empirical_risk(estimate, test_points, model)
}

/// Mean cross-entropy over labeled points.
pub fn compute_klr_test_loss(f: &Expansion, test: &[LabeledPoint]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut acc = 0.0;
    for p in test {
        acc += klr_loss(f, &p.x, p.label)?;
    }
    Ok(acc / test.len() as f64)
}

/// Fraction of misclassified points.
pub fn klr_error_rate(f: &Expansion, test: &[LabeledPoint]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut wrong = 0usize;
    for p in test {
        wrong += (klr_predict(f, &p.x)? != p.label) as usize;
    }
    Ok(wrong as f64 / test.len() as f64)
}

/// Sign census of a primal estimate over an evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityAudit {
    pub points: usize,
    /// Points with `f < 0`.
    pub negatives: usize,
    /// Points with `f <= 0`.
    pub non_positive: usize,
    pub min_value: f64,
}

pub fn positivity_audit(z: &DualFunction, grid: &[Vec<f64>]) -> PositivityAudit {
    let mut a = PositivityAudit {
        points: grid.len(),
        negatives: 0,
        non_positive: 0,
        min_value: f64::INFINITY,
    };
    for x in grid {
        let f = z.primal_clamped(x).0;
        a.negatives += (f < 0.0) as usize;
        a.non_positive += (f <= 0.0) as usize;
        a.min_value = a.min_value.min(f);
    }
    a
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub samples_processed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub model_order: usize,
    pub rmse: Option<f64>,
    pub wall_time_ms: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::Data {
            line: 1,
            message: format!("unexpected metrics header {header:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Final state of a run, scalar for point processes and multi-output for KLR.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimate {
    Intensity(DualFunction),
    Classifier(Expansion),
}

impl Estimate {
    pub fn model_order(&self) -> usize {
        match self {
            Estimate::Intensity(z) => z.model_order(),
            Estimate::Classifier(f) => f.model_order(),
        }
    }
}

/// Machine-readable result of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algorithm: Algorithm,
    pub kernel: Kernel,
    pub steps: u64,
    pub samples_processed: u64,
    pub epochs_completed: usize,
    pub initial_test_loss: f64,
    pub initial_rmse: Option<f64>,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_rmse: Option<f64>,
    pub final_model_order: usize,
    /// Holdout misclassification rate (classification only).
    pub test_error: Option<f64>,
    /// Mean model order over the last epoch.
    pub mean_model_order_last_epoch: Option<f64>,
    /// Hybrid: step at which the dictionary was frozen.
    pub switch_step: Option<u64>,
    /// Max over steps of `(||z~ - z_{t+1}|| - eps_t) / eta`; `<= 0` means the bound held.
    pub projection_max_violation: Option<f64>,
    /// Max over recorded steps of the distance of `eig(A^{-1})` outside `(0, 1/delta]`.
    pub curvature_max_violation: Option<f64>,
    pub saturations: u64,
    pub positivity: Option<PositivityAudit>,
    pub runtime_ms: f64,
    pub warnings: Vec<String>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub checkpoint: Checkpoint,
    pub estimate: Estimate,
}

impl RunOutput {
    /// Write `metrics.csv`, `model.json` and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(dir.join("metrics.csv"), &self.records)?;
        std::fs::write(dir.join("model.json"), self.checkpoint.to_json()?)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        std::fs::write(dir.join("config.json"), self.config.to_json()?)?;
        Ok(())
    }
}

enum Runner {
    Functional {
        state: SpppotState,
        model: PoissonModel,
        polk: bool,
    },
    Weights {
        state: QuasiNewtonState,
        delta: Option<f64>,
    },
    Hybrid {
        state: Box<HybridState>,
        eta: f64,
        delta: f64,
    },
    Averaging {
        state: DualAveragingState,
        model: PoissonModel,
    },
    Klr {
        state: SpppotState,
        model: KlrModel,
    },
}

struct StepInfo {
    model_order: usize,
    projection: Option<f64>,
}

impl Runner {
    fn build(
        cfg: &ExperimentConfig,
        kernel: Kernel,
        model: Option<&PoissonModel>,
        classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let budget = || -> Result<BudgetPolicy> {
            cfg.budget
                .ok_or_else(|| Error::config("budget", "required for this algorithm"))?
                .policy()
        };
        let model = || model.cloned().ok_or_else(|| Error::config("grid", "required"));
        Ok(match cfg.algorithm {
            Algorithm::Spppot | Algorithm::Polk => {
                let eta = positive("eta", cfg.eta)?;
                let model = model()?;
                let polk = cfg.algorithm == Algorithm::Polk;
                let map = if polk { MirrorMap::SquaredNorm } else { MirrorMap::Kl };
                let z0 = model.grid_function(kernel, map, -eta * model.cell_volume());
                Runner::Functional {
                    state: SpppotState::new(Expansion::from_dual(&z0), eta, budget()?)?,
                    model,
                    polk,
                }
            }
            Algorithm::DualAveraging => {
                let eta = positive("eta", cfg.eta)?;
                let model = model()?;
                let h0 = model.grid_function(kernel, MirrorMap::Kl, model.cell_volume());
                Runner::Averaging {
                    state: DualAveragingState::new(Expansion::from_dual(&h0), eta, budget()?)?,
                    model,
                }
            }
            Algorithm::Pmd | Algorithm::QuasiNewton => {
                let model = model()?;
                let z0 = model.grid_function(kernel, MirrorMap::Kl, cfg.init_weight.unwrap_or(DEFAULT_NEWTON_INIT));
                let schedule = cfg.weight_schedule(cfg.eta)?;
                let state = match cfg.algorithm {
                    Algorithm::Pmd => QuasiNewtonState::mirror_descent(z0, &model, schedule)?,
                    _ => QuasiNewtonState::new(z0, &model, positive("delta", cfg.delta)?, schedule)?,
                };
                Runner::Weights {
                    state,
                    delta: cfg.delta,
                }
            }
            Algorithm::Hybrid => {
                let eta = positive("eta", cfg.eta)?;
                let delta = positive("delta", cfg.delta)?;
                let model = model()?;
                let z0 = model.grid_function(kernel, MirrorMap::Kl, -eta * model.cell_volume());
                let settings = HybridSettings {
                    functional_eta: eta,
                    newton_schedule: cfg.weight_schedule(cfg.eta_newton)?,
                    budget: budget()?,
                    delta,
                    functional_batch: cfg.batch_size,
                    newton_batch: cfg.newton_batch_size,
                    stability_window: cfg.stability_window,
                };
                Runner::Hybrid {
                    state: Box::new(HybridState::new(z0, model, settings)?),
                    eta,
                    delta,
                }
            }
            Algorithm::KlrSpppot => {
                let eta = positive("eta", cfg.eta)?;
                let model = KlrModel::new(classes)?;
                let f0 = Expansion::zeros(kernel, MirrorMap::SquaredNorm, Dictionary::new(dim), classes);
                Runner::Klr {
                    state: SpppotState::new(f0, eta, budget()?)?,
                    model,
                }
            }
        })
    }

    fn batch_size(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Runner::Weights { delta: None, .. } => cfg.batch_size,
            Runner::Weights { .. } => cfg.newton_batch_size,
            Runner::Hybrid { state, .. } => state.batch_size(),
            _ => cfg.batch_size,
        }
    }

    fn step(&mut self, points: &[Vec<f64>], labeled: &[LabeledPoint], idx: &[usize]) -> Result<StepInfo> {
        let batch = || idx.iter().map(|&i| points[i].clone()).collect::<Vec<_>>();
        Ok(match self {
            Runner::Functional { state, model, polk } => {
                let rep = if *polk {
                    polk_step(state, &batch(), model)?
                } else {
                    spppot_step(state, &batch(), model)?
                };
                StepInfo {
                    model_order: rep.model_order,
                    projection: Some((rep.residual - rep.epsilon) / state.eta),
                }
            }
            Runner::Weights { state, delta } => {
                if delta.is_some() {
                    quasi_newton_step(state, &batch())?;
                } else {
                    pmd_step(state, &batch())?;
                }
                StepInfo {
                    model_order: state.z.model_order(),
                    projection: None,
                }
            }
            Runner::Hybrid { state, eta, .. } => match state.step(&batch())? {
                HybridStep::Functional(rep) => StepInfo {
                    model_order: rep.model_order,
                    projection: Some((rep.residual - rep.epsilon) / *eta),
                },
                HybridStep::Newton { .. } => StepInfo {
                    model_order: state.dual().model_order(),
                    projection: None,
                },
            },
            Runner::Averaging { state, model } => {
                let rep = dual_averaging_step(state, &batch(), model)?;
                StepInfo {
                    model_order: rep.model_order,
                    projection: Some(rep.residual - rep.epsilon),
                }
            }
            Runner::Klr { state, model } => {
                let b: Vec<LabeledPoint> = idx.iter().map(|&i| labeled[i].clone()).collect();
                let rep = spppot_step(state, &b, model)?;
                StepInfo {
                    model_order: rep.model_order,
                    projection: Some((rep.residual - rep.epsilon) / state.eta),
                }
            }
        })
    }

    fn estimate(&self) -> Estimate {
        match self {
            Runner::Functional { state, .. } => Estimate::Intensity(state.dual()),
            Runner::Weights { state, .. } => Estimate::Intensity(state.z.clone()),
            Runner::Hybrid { state, .. } => Estimate::Intensity(state.dual()),
            Runner::Averaging { state, .. } => Estimate::Intensity(state.dual_iterate().output(0)),
            Runner::Klr { state, .. } => Estimate::Classifier(state.z.clone()),
        }
    }

    fn saturations(&self) -> u64 {
        match self {
            Runner::Functional { state, .. } | Runner::Klr { state, .. } => state.saturations,
            Runner::Weights { state, .. } => state.saturations,
            Runner::Hybrid { state, .. } => state.saturations(),
            Runner::Averaging { state, .. } => state.saturations,
        }
    }

    /// Distance of the inverse-Hessian spectrum outside `(0, 1/delta]`.
    fn curvature_violation(&self) -> Option<f64> {
        let (q, delta) = match self {
            Runner::Weights { state, delta: Some(d) } => (state, *d),
            Runner::Hybrid { state, delta, .. } => (state.newton_state()?, *delta),
            _ => return None,
        };
        let a_inv = q.hessian.as_ref()?.inverse();
        let sym = (a_inv + a_inv.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((hi - 1.0 / delta).max(-lo))
    }

    fn checkpoint(&self, rng: &ChaCha8Rng) -> Checkpoint {
        match self {
            Runner::Functional { state, .. } | Runner::Klr { state, .. } => Checkpoint::from_spppot(state, Some(rng)),
            Runner::Weights { state, .. } => Checkpoint::from_newton(state, Some(rng)),
            Runner::Hybrid { state, .. } => match (state.functional_state(), state.newton_state()) {
                (Some(s), _) => Checkpoint::from_spppot(s, Some(rng)),
                (_, Some(q)) => Checkpoint::from_newton(q, Some(rng)),
                _ => unreachable!("hybrid is always in one phase"),
            },
            Runner::Averaging { state, .. } => Checkpoint {
                function: ExpansionRepr::from(&state.dual_iterate()),
                a_inv: None,
                hessian_updates: 0,
                budget: Some(state.budget),
                steps: state.steps,
                saturations: state.saturations,
                rng: Some(crate::optimizers::RngState::capture(rng)),
            },
        }
    }
}

/// Test loss, train loss and RMSE of an estimate.
struct Scorer<'a> {
    model: Option<&'a PoissonModel>,
    train_points: &'a [Vec<f64>],
    train_labeled: &'a [LabeledPoint],
    test_points: &'a [Vec<f64>],
    test_labeled: &'a [LabeledPoint],
    truth: Option<fn(&[f64]) -> f64>,
    eval_grid: &'a [Vec<f64>],
}

impl Scorer<'_> {
    /// `(train_loss, test_loss, rmse)`.
    fn score(&self, e: &Estimate) -> Result<(f64, f64, Option<f64>)> {
        match e {
            Estimate::Intensity(z) => {
                let model = self.model.expect("point-process runs carry a model");
                let train = compute_test_loss(z, model, self.train_points)?;
                let test = compute_test_loss(z, model, self.test_points)?;
                let rmse = match self.truth {
                    Some(t) => Some(compute_rmse(z, t, self.eval_grid)?),
                    None => None,
                };
                Ok((train, test, rmse))
            }
            Estimate::Classifier(f) => Ok((
                compute_klr_test_loss(f, self.train_labeled)?,
                compute_klr_test_loss(f, self.test_labeled)?,
                None,
            )),
        }
    }
}

/// Run one experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    let kernel = resolve_kernel(cfg, &data.train)?;
    let model = if cfg.algorithm.is_poisson() {
        Some(poisson_model(cfg, &data.train.bounds)?)
    } else {
        None
    };
    if let Some(m) = &model {
        if m.dim() != data.train.dim() || data.test.dim() != data.train.dim() {
            return Err(Error::config("grid", "grid dimension does not match the data"));
        }
    }
    let (train_labeled, test_labeled, classes) = if cfg.algorithm.is_poisson() {
        (Vec::new(), Vec::new(), 0)
    } else {
        let tr = data.train.labeled_points()?;
        let te = data.test.labeled_points()?;
        let classes = data.train.classes().max(data.test.classes());
        (tr, te, classes)
    };
    let mut runner = Runner::build(cfg, kernel, model.as_ref(), classes, data.train.dim())?;

    let eval_bounds = model
        .as_ref()
        .map_or_else(|| data.train.bounds.clone(), |m| m.bounds().to_vec());
    let eval_grid = evaluation_grid(&eval_bounds, EVAL_GRID_POINTS);
    let n_sub = cfg.train_eval_size.min(data.train.len());
    let scorer = Scorer {
        model: model.as_ref(),
        train_points: &data.train.points[..n_sub],
        train_labeled: &train_labeled[..n_sub.min(train_labeled.len())],
        test_points: &data.test.points,
        test_labeled: &test_labeled,
        truth: data.truth,
        eval_grid: &eval_grid,
    };

    let (_, initial_test_loss, initial_rmse) = scorer.score(&runner.estimate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::new();
    let mut steps: u64 = 0;
    let mut samples: u64 = 0;
    let mut epochs_completed = 0;
    let mut projection: Option<f64> = None;
    let mut curvature: Option<f64> = None;
    let mut epoch_orders: Vec<usize> = Vec::new();
    let mut last_epoch_orders: Vec<usize> = Vec::new();
    let stamp = |started: &Instant| {
        if cfg.timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };
    let record = |runner: &Runner, steps: u64, samples: u64, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let e = runner.estimate();
        let (train_loss, test_loss, rmse) = scorer.score(&e)?;
        records.push(MetricsRecord {
            step: steps,
            samples_processed: samples,
            train_loss,
            test_loss,
            model_order: e.model_order(),
            rmse,
            wall_time_ms: stamp(&started),
        });
        Ok(())
    };

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        epoch_orders.clear();
        let mut pos = 0;
        loop {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let b = runner.batch_size(cfg);
            if pos + b > order.len() {
                break;
            }
            let info = runner.step(&data.train.points, &train_labeled, &order[pos..pos + b])?;
            pos += b;
            steps += 1;
            samples += b as u64;
            epoch_orders.push(info.model_order);
            if let Some(v) = info.projection {
                projection = Some(projection.map_or(v, |m: f64| m.max(v)));
            }
            if steps.is_multiple_of(cfg.record_every as u64) {
                if let Some(v) = runner.curvature_violation() {
                    curvature = Some(curvature.map_or(v, |m: f64| m.max(v)));
                }
                record(&runner, steps, samples, &mut records)?;
            }
        }
        epochs_completed += 1;
        last_epoch_orders = std::mem::take(&mut epoch_orders);
    }
    if steps > 0 && records.last().is_none_or(|r| r.step != steps) {
        if let Some(v) = runner.curvature_violation() {
            curvature = Some(curvature.map_or(v, |m: f64| m.max(v)));
        }
        record(&runner, steps, samples, &mut records)?;
    }
    if last_epoch_orders.is_empty() {
        last_epoch_orders = epoch_orders;
    }

    let estimate = runner.estimate();
    let (final_train_loss, final_test_loss, final_rmse) = scorer.score(&estimate)?;
    let test_error = match &estimate {
        Estimate::Classifier(f) => Some(klr_error_rate(f, &test_labeled)?),
        Estimate::Intensity(_) => None,
    };
    let positivity = match &estimate {
        Estimate::Intensity(z) => Some(positivity_audit(z, &eval_grid)),
        Estimate::Classifier(_) => None,
    };
    let (switch_step, never_stabilized) = match &runner {
        Runner::Hybrid { state, .. } => (state.switch_step(), !state.in_newton_phase()),
        _ => (None, false),
    };
    let saturations = runner.saturations();

    let mut warnings = Vec::new();
    if never_stabilized && steps > 0 {
        warnings.push("hybrid: model order never stabilized; returning the functional-phase estimate".into());
    }
    if saturations > 0 {
        warnings.push(format!(
            "{saturations} dual evaluations were clamped before exponentiation"
        ));
    }
    if let (Some(a), Estimate::Intensity(z)) = (&positivity, &estimate) {
        if z.map == MirrorMap::Kl && a.non_positive > 0 {
            warnings.push(format!(
                "KL estimate is non-positive at {} audit points",
                a.non_positive
            ));
        }
    }
    if cfg.algorithm.compresses() && projection.is_some_and(|v| v > INVARIANT_TOLERANCE) {
        warnings.push("compression residual exceeded its budget".into());
    }
    if cfg.algorithm.second_order() && curvature.is_some_and(|v| v > INVARIANT_TOLERANCE) {
        warnings.push("inverse Hessian left its spectral bounds".into());
    }

    let summary = RunSummary {
        name: cfg.label(),
        algorithm: cfg.algorithm,
        kernel,
        steps,
        samples_processed: samples,
        epochs_completed,
        initial_test_loss,
        initial_rmse,
        final_train_loss,
        final_test_loss,
        final_rmse,
        final_model_order: estimate.model_order(),
        test_error,
        mean_model_order_last_epoch: (!last_epoch_orders.is_empty())
            .then(|| last_epoch_orders.iter().sum::<usize>() as f64 / last_epoch_orders.len() as f64),
        switch_step,
        projection_max_violation: projection,
        curvature_max_violation: curvature,
        saturations,
        positivity,
        runtime_ms: if cfg.timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
        warnings,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        summary,
        checkpoint: runner.checkpoint(&rng),
        estimate,
    })
}

/// Metrics of a stored model against a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model_order: usize,
    pub points: usize,
    pub test_loss: f64,
    pub rmse: Option<f64>,
    pub test_error: Option<f64>,
    pub positivity: Option<PositivityAudit>,
}

/// Score a checkpoint written by [`RunOutput::write`] on `points`, or on the
/// config's test set when `points` is `None`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Checkpoint,
    points: Option<&PointStream>,
) -> Result<Evaluation> {
    let data = prepare_data(cfg)?;
    let set = points.unwrap_or(&data.test);
    if set.is_empty() {
        return Err(Error::Data {
            line: 0,
            message: "evaluation set is empty".into(),
        });
    }
    let f = Expansion::try_from(&checkpoint.function)?;
    if cfg.algorithm.is_poisson() {
        let model = poisson_model(cfg, &data.train.bounds)?;
        let z = f.output(0);
        if z.dim() != set.dim() {
            return Err(Error::DimensionMismatch {
                expected: z.dim(),
                found: set.dim(),
            });
        }
        let grid = evaluation_grid(model.bounds(), EVAL_GRID_POINTS);
        let rmse = match (points, data.truth) {
            (None, Some(t)) => Some(compute_rmse(&z, t, &grid)?),
            (Some(_), Some(t)) if matches!(cfg.dataset, DatasetConfig::Toy { .. }) => Some(compute_rmse(&z, t, &grid)?),
            _ => None,
        };
        Ok(Evaluation {
            model_order: z.model_order(),
            points: set.len(),
            test_loss: compute_test_loss(&z, &model, &set.points)?,
            rmse,
            test_error: None,
            positivity: Some(positivity_audit(&z, &grid)),
        })
    } else {
        let labeled = set.labeled_points()?;
        Ok(Evaluation {
            model_order: f.model_order(),
            points: set.len(),
            test_loss: compute_klr_test_loss(&f, &labeled)?,
            rmse: None,
            test_error: Some(klr_error_rate(&f, &labeled)?),
            positivity: None,
        })
    }
}

/// Cartesian sweep over step sizes, constant budgets and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl SweepConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s: SweepConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            s.base.resolve_paths(dir);
        }
        Ok(s)
    }

    /// Named configs, one per grid cell. Empty axes keep the base value.
    pub fn expand(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        if !self.epsilon.is_empty() && !matches!(self.base.budget, Some(BudgetConfig::Constant { .. })) {
            return Err(Error::config(
                "epsilon",
                "sweeping epsilon needs a constant base budget",
            ));
        }
        let etas: Vec<Option<f64>> = if self.eta.is_empty() {
            vec![None]
        } else {
            self.eta.iter().copied().map(Some).collect()
        };
        let epss: Vec<Option<f64>> = if self.epsilon.is_empty() {
            vec![None]
        } else {
            self.epsilon.iter().copied().map(Some).collect()
        };
        let seeds: Vec<Option<u64>> = if self.seeds.is_empty() {
            vec![None]
        } else {
            self.seeds.iter().copied().map(Some).collect()
        };
        let base = self.base.label();
        let mut out = Vec::new();
        for (i, eta) in etas.iter().enumerate() {
            for (j, eps) in epss.iter().enumerate() {
                for (k, seed) in seeds.iter().enumerate() {
                    let mut c = self.base.clone();
                    if let Some(e) = eta {
                        c.eta = Some(*e);
                    }
                    if let Some(e) = eps {
                        c.budget = Some(BudgetConfig::Constant { epsilon: *e });
                    }
                    if let Some(s) = seed {
                        c.seed = *s;
                    }
                    let name = format!("{base}_eta{i}_eps{j}_seed{k}");
                    c.name = Some(name.clone());
                    c.validate()?;
                    out.push((name, c));
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub status: String,
    pub final_test_loss: Option<f64>,
    pub final_model_order: Option<usize>,
    pub final_rmse: Option<f64>,
}

/// Run every cell of the sweep on a bounded pool; each cell writes into
/// `out/<name>/`, and `out/sweep.csv` indexes the results. A failing cell is
/// reported in its row and does not stop the others.
pub fn run_sweep(sweep: &SweepConfig, out: impl AsRef<Path>) -> Result<Vec<SweepResult>> {
    let out = out.as_ref();
    let cells = sweep.expand()?;
    std::fs::create_dir_all(out)?;
    let workers = sweep
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let results: Vec<SweepResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(name, cfg)| {
                let epsilon = match cfg.budget {
                    Some(BudgetConfig::Constant { epsilon }) => Some(epsilon),
                    _ => None,
                };
                let mut r = SweepResult {
                    name: name.clone(),
                    eta: cfg.eta,
                    epsilon,
                    seed: cfg.seed,
                    status: "ok".into(),
                    final_test_loss: None,
                    final_model_order: None,
                    final_rmse: None,
                };
                match run_experiment(cfg).and_then(|o| o.write(out.join(name)).map(|_| o)) {
                    Ok(o) => {
                        r.final_test_loss = Some(o.summary.final_test_loss);
                        r.final_model_order = Some(o.summary.final_model_order);
                        r.final_rmse = o.summary.final_rmse;
                    }
                    Err(e) => r.status = e.to_string(),
                }
                r
            })
            .collect()
    });
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_config(algorithm: Algorithm) -> ExperimentConfig {
        let json = r#"{
            "algorithm": "spppot",
            "kernel": {"family": "gaussian", "params": [0.0065]},
            "eta": 0.012,
            "budget": {"kind": "constant", "epsilon": 6.6e-6},
            "epochs": 1,
            "grid": {"points_per_dim": [20]},
            "seed": 5,
            "dataset": {"kind": "toy", "expected": 300, "test_expected": 100}
        }"#;
        let mut c: ExperimentConfig = serde_json::from_str(json).unwrap();
        c.algorithm = algorithm;
        c
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = toy_config(Algorithm::Spppot);
        assert_eq!(c.batch_size, 30);
        assert_eq!(c.record_every, 10);
        assert_eq!(c.stability_window, DEFAULT_STABILITY_WINDOW);
        assert!(!c.timing);
        c.validate().unwrap();

        let mut q = toy_config(Algorithm::QuasiNewton);
        q.budget = None;
        let err = q.validate().unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
        q.delta = Some(1.0);
        q.validate().unwrap();

        let mut s = toy_config(Algorithm::Spppot);
        s.delta = Some(1.0);
        assert!(s.validate().unwrap_err().to_string().contains("delta"));

        let mut k = toy_config(Algorithm::KlrSpppot);
        k.grid = None;
        assert!(k.validate().unwrap_err().to_string().contains("dataset"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"algorithm":"pmd","epochs":1,"etaa":1,"dataset":{"kind":"toy"}}"#)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("etaa"));
    }

    #[test]
    fn rmse_of_truth_and_offset() {
        let model = PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 1.0)],
            points_per_dim: vec![4],
        })
        .unwrap();
        let z = model.grid_function(Kernel::gaussian(0.05).unwrap(), MirrorMap::SquaredNorm, 0.0);
        let grid = evaluation_grid(&[(0.0, 1.0)], EVAL_GRID_POINTS);
        assert_eq!(grid.len(), 1001);
        assert_eq!(compute_rmse(&z, |_| 0.0, &grid).unwrap(), 0.0);
        assert_relative_eq!(compute_rmse(&z, |_| 0.25, &grid).unwrap(), 0.25, epsilon = 1e-15);
        assert!(compute_rmse(&z, |_| 0.0, &[]).is_err());
    }

    #[test]
    fn empty_estimate_has_unit_test_loss() {
        // z = 0 under KL gives f = 1, so the loss is h |U| = 1 whatever the points.
        let model = PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 1.0)],
            points_per_dim: vec![10],
        })
        .unwrap();
        let z = model.grid_function(Kernel::gaussian(0.01).unwrap(), MirrorMap::Kl, 0.0);
        for pts in [vec![vec![0.1]], vec![vec![0.3], vec![0.99]]] {
            assert_relative_eq!(compute_test_loss(&z, &model, &pts).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn test_loss_matches_hand_sum() {
        // two grid atoms at 0.25, 0.75 (h = 0.5), weights a, b, KL map
        let model = PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 1.0)],
            points_per_dim: vec![2],
        })
        .unwrap();
        let c = 0.04;
        let k = |x: f64, y: f64| (-(x - y) * (x - y) / (2.0 * c)).exp();
        let (a, b) = (0.3, -0.2);
        let mut z = model.grid_function(Kernel::gaussian(c).unwrap(), MirrorMap::Kl, 0.0);
        z.weights = vec![a, b];
        let zf = |x: f64| a * k(0.25, x) + b * k(0.75, x);
        let pts = [0.1, 0.5, 0.8];
        let data: f64 = pts.iter().map(|&x| -zf(x)).sum::<f64>() / 3.0;
        let integral = 0.5 * (zf(0.25).exp() + zf(0.75).exp());
        let got = compute_test_loss(&z, &model, &pts.map(|x| vec![x])).unwrap();
        assert_relative_eq!(got, data + integral, epsilon = 1e-14);
    }

    #[test]
    fn uniform_classifier_loss_is_log_classes() {
        let f = Expansion::zeros(
            Kernel::gaussian(1.0).unwrap(),
            MirrorMap::SquaredNorm,
            Dictionary::new(2),
            3,
        );
        let pts = vec![
            LabeledPoint {
                x: vec![0.0, 1.0],
                label: 2,
            },
            LabeledPoint {
                x: vec![3.0, -1.0],
                label: 0,
            },
        ];
        assert_relative_eq!(compute_klr_test_loss(&f, &pts).unwrap(), 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn zero_epochs_give_header_only_metrics() {
        let mut c = toy_config(Algorithm::Spppot);
        c.epochs = 0;
        let out = run_experiment(&c).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.summary.steps, 0);
        assert_eq!(out.summary.final_model_order, 20);
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.trim(), METRICS_HEADER.join(","));
        let ck = Checkpoint::from_json(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
        assert_eq!(ck.steps, 0);
    }

    #[test]
    fn runs_are_deterministic_and_round_trip() {
        let mut c = toy_config(Algorithm::Spppot);
        c.record_every = 2;
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.records, b.records);
        assert!(!a.records.is_empty());
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(back, a.records);
        for r in &a.records {
            assert!(r.model_order >= 20);
            assert_eq!(r.wall_time_ms, 0.0);
        }
        let s = &a.summary;
        assert!(s.projection_max_violation.unwrap() <= 1e-9);
        assert_eq!(s.positivity.unwrap().non_positive, 0);
        let ev = evaluate_checkpoint(&c, &a.checkpoint, None).unwrap();
        assert_eq!(ev.test_loss, s.final_test_loss);
    }

    #[test]
    fn every_poisson_algorithm_runs() {
        for algo in [
            Algorithm::Polk,
            Algorithm::Pmd,
            Algorithm::QuasiNewton,
            Algorithm::Hybrid,
            Algorithm::DualAveraging,
        ] {
            let mut c = toy_config(algo);
            match algo {
                Algorithm::Polk => c.budget = Some(BudgetConfig::Constant { epsilon: 1e-6 }),
                Algorithm::Pmd => {
                    c.budget = None;
                    c.eta = Some(0.05);
                }
                Algorithm::QuasiNewton => {
                    c.budget = None;
                    c.eta = Some(1.0);
                    c.delta = Some(1.0);
                }
                Algorithm::Hybrid => {
                    c.eta_newton = Some(1.0);
                    c.delta = Some(1.0);
                    c.stability_window = 2;
                }
                _ => {}
            }
            c.max_steps = Some(40);
            let out = run_experiment(&c).unwrap_or_else(|e| panic!("{algo:?}: {e}"));
            assert!(out.summary.steps > 0, "{algo:?}");
            assert!(out.summary.final_test_loss.is_finite(), "{algo:?}");
            if algo.second_order() {
                assert!(out.summary.curvature_max_violation.unwrap() <= 1e-8, "{algo:?}");
            }
        }
    }

    #[test]
    fn classifier_run_on_blobs() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{
            "algorithm": "klr_spppot",
            "kernel": {"family": "gaussian", "params": [1.0]},
            "eta": 0.5,
            "budget": {"kind": "constant", "epsilon": 0.05},
            "batch_size": 5,
            "epochs": 2,
            "dataset": {"kind": "blobs", "classes": 3, "per_class": 60, "separation": 6.0}
        }"#,
        )
        .unwrap();
        let out = run_experiment(&c).unwrap();
        assert!(out.summary.test_error.unwrap() <= 0.1);
        assert!(out.summary.positivity.is_none());
    }

    #[test]
    fn sweep_expands_the_grid() {
        let s = SweepConfig {
            base: toy_config(Algorithm::Spppot),
            eta: vec![0.01, 0.02],
            epsilon: vec![1e-6, 1e-5, 1e-4],
            seeds: vec![],
            workers: Some(1),
        };
        let cells = s.expand().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[5].1.eta, Some(0.02));
        assert_eq!(cells[5].1.budget, Some(BudgetConfig::Constant { epsilon: 1e-4 }));
    }

    #[test]
    fn evaluation_grid_covers_the_box() {
        let g = evaluation_grid(&[(0.0, 1.0), (-1.0, 1.0)], EVAL_GRID_POINTS);
        assert_eq!(g.len(), 32 * 32);
        assert_eq!(g[0], vec![0.0, -1.0]);
        assert_eq!(g[g.len() - 1], vec![1.0, 1.0]);
    }
}
