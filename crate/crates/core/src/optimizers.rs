//! Online optimizers over sparse kernel expansions.
//!
//! * [`spppot_step`]: projected pseudo-mirror descent. The functional
//!   pseudo-gradient is folded into the dual iterate and the result is
//!   compressed by KOMP. With the squared-norm map this is POLK ([`polk_step`]).
//! * [`quasi_newton_step`]: online quasi-Newton on the weights of a frozen
//!   dictionary, with a Sherman-Morrison inverse-Hessian update. Without a
//!   Hessian it is plain mirror descent on the weights ([`pmd_step`]).
//! * [`HybridState`]: functional steps until the model order settles, then
//!   quasi-Newton steps on the frozen dictionary.
//! * [`dual_averaging_step`]: accumulates raw pseudo-gradients and reads the
//!   primal off the scaled accumulator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_gram, kernel_vector, Dictionary, Kernel};
use crate::komp::{komp_prune_weights, BudgetPolicy};
use crate::models::{Objective, PoissonModel, PseudoGradient};
use crate::rkhs::{DualFunction, Expansion, MirrorMap, DUAL_CLAMP};

/// Default number of unchanged-order steps before the hybrid switches phase.
pub const DEFAULT_STABILITY_WINDOW: usize = 200;

/// Default initial weight for quasi-Newton on the grid.
pub const DEFAULT_NEWTON_INIT: f64 = -0.01;

/// Per-step diagnostics of a compressed functional update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Budget used by this step's compression.
    pub epsilon: f64,
    /// `||z~ - z_{t+1}||` as measured by the compression.
    pub residual: f64,
    pub model_order: usize,
    /// Sample evaluations whose dual value was clamped before exponentiation.
    pub clamped: usize,
}

fn check_batch<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    Ok(())
}

/// Batch-averaged pseudo-gradient of `obj` where the primal at a point is read
/// from `e` through `dual_scale * e(x)` and the map.
fn batch_gradient<O: Objective>(
    obj: &O,
    e: &Expansion,
    dual_scale: f64,
    batch: &[O::Sample],
) -> Result<(PseudoGradient, usize)> {
    check_batch(batch)?;
    if obj.outputs() != e.outputs() {
        return Err(Error::DimensionMismatch {
            expected: obj.outputs(),
            found: e.outputs(),
        });
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut clamped = 0;
    let mut atoms = Vec::with_capacity(batch.len());
    for s in batch {
        let x = obj.point(s);
        let duals = e.dual_at(x)?;
        let primal: Vec<f64> = duals
            .iter()
            .map(|d| {
                let (f, c) = e.map.grad_conj_clamped(dual_scale * d);
                clamped += c as usize;
                f
            })
            .collect();
        let mut coeffs = obj.sample_coefficients(s, &primal, e.map);
        coeffs.iter_mut().for_each(|c| *c *= inv_b);
        atoms.push((x.to_vec(), coeffs));
    }
    Ok((
        PseudoGradient {
            atoms,
            grid: obj.grid_term(),
        },
        clamped,
    ))
}

/// `e + scale * g`. Grid terms land on the leading fixed atoms; sample atoms
/// bitwise equal to an existing atom are merged into it, others are appended
/// as removable atoms.
pub fn add_pseudo_gradient(e: &Expansion, g: &PseudoGradient, scale: f64) -> Result<Expansion> {
    let mut dict = e.dict.clone();
    let outputs = e.outputs();
    let mut rows: Vec<Vec<f64>> = (0..e.model_order())
        .map(|n| e.weights.row(n).iter().copied().collect())
        .collect();
    if let Some(term) = g.grid {
        if term.len > dict.len() || (0..term.len).any(|i| !dict.is_fixed(i)) {
            return Err(Error::InvalidArgument(format!(
                "iterate must start with {} fixed grid atoms",
                term.len
            )));
        }
        for row in rows.iter_mut().take(term.len) {
            row[0] += scale * term.coefficient;
        }
    }
    for (x, coeffs) in &g.atoms {
        if coeffs.len() != outputs {
            return Err(Error::DimensionMismatch {
                expected: outputs,
                found: coeffs.len(),
            });
        }
        match dict.position(x) {
            Some(i) => rows[i].iter_mut().zip(coeffs).for_each(|(w, c)| *w += scale * c),
            None => {
                dict.push(x, false)?;
                rows.push(coeffs.iter().map(|c| scale * c).collect());
            }
        }
    }
    let n = rows.len();
    let weights = DMatrix::from_fn(n, outputs, |i, c| rows[i][c]);
    Expansion::new(e.kernel, e.map, dict, weights)
}

fn check_finite(e: &Expansion) -> Result<()> {
    if e.weights.iter().all(|w| w.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBreakdown("non-finite weight after update".into()))
    }
}

fn compress(e: &Expansion, epsilon: f64) -> Result<(Expansion, f64)> {
    let pruned = komp_prune_weights(&e.kernel, &e.dict, &e.weights, epsilon)?;
    let out = Expansion::new(e.kernel, e.map, e.dict.select(&pruned.kept), pruned.weights)?;
    check_finite(&out)?;
    Ok((out, pruned.residual))
}

/// Projected pseudo-mirror descent state.
#[derive(Debug, Clone)]
pub struct SpppotState {
    pub z: Expansion,
    pub eta: f64,
    pub budget: BudgetPolicy,
    pub steps: u64,
    pub saturations: u64,
    /// Keep the uncompressed iterate of the last step in `pre_compression`.
    pub keep_pre_compression: bool,
    pub pre_compression: Option<Expansion>,
}

impl SpppotState {
    pub fn new(z: Expansion, eta: f64, budget: BudgetPolicy) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {eta}")));
        }
        Ok(SpppotState {
            z,
            eta,
            budget,
            steps: 0,
            saturations: 0,
            keep_pre_compression: false,
            pre_compression: None,
        })
    }

    /// Scalar view of output 0.
    pub fn dual(&self) -> DualFunction {
        self.z.output(0)
    }
}

/// One minibatch step `z~ = z - eta * mean_b g_b`, then KOMP with the current
/// budget, then the budget update with the new model order.
pub fn spppot_step<O: Objective>(state: &mut SpppotState, batch: &[O::Sample], obj: &O) -> Result<StepReport> {
    let epsilon = state.budget.epsilon(state.eta);
    let (g, clamped) = batch_gradient(obj, &state.z, 1.0, batch)?;
    let pre = add_pseudo_gradient(&state.z, &g, -state.eta)?;
    check_finite(&pre)?;
    let (next, residual) = compress(&pre, epsilon)?;
    state.pre_compression = state.keep_pre_compression.then_some(pre);
    state.z = next;
    state.budget.update(state.z.model_order());
    state.steps += 1;
    state.saturations += clamped as u64;
    Ok(StepReport {
        epsilon,
        residual,
        model_order: state.z.model_order(),
        clamped,
    })
}

/// [`spppot_step`] with the squared-norm map; positivity is not maintained.
pub fn polk_step(state: &mut SpppotState, batch: &[Vec<f64>], model: &PoissonModel) -> Result<StepReport> {
    if state.z.map != MirrorMap::SquaredNorm {
        return Err(Error::InvalidArgument("POLK runs on the squared-norm map".into()));
    }
    spppot_step(state, batch, model)
}

/// Inverse of the accumulated curvature `A = delta I + sum g g^T`, maintained
/// by rank-one Sherman-Morrison updates.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    a_inv: DMatrix<f64>,
    updates: u64,
}

impl HessianState {
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
        }
        Ok(HessianState {
            a_inv: DMatrix::identity(dim, dim) / delta,
            updates: 0,
        })
    }

    pub fn from_inverse(a_inv: DMatrix<f64>, updates: u64) -> Result<Self> {
        if !a_inv.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a_inv.nrows(),
                found: a_inv.ncols(),
            });
        }
        Ok(HessianState { a_inv, updates })
    }

    pub fn dim(&self) -> usize {
        self.a_inv.nrows()
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// `A^{-1} g`.
    pub fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        &self.a_inv * g
    }

    /// `A <- A + g g^T`. On a non-positive or non-finite denominator the state
    /// is left untouched and an error is returned.
    pub fn sherman_morrison_update(&mut self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: g.len(),
            });
        }
        let u = &self.a_inv * g;
        let denom = 1.0 + g.dot(&u);
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::NumericalBreakdown(format!(
                "Sherman-Morrison denominator {denom}"
            )));
        }
        // A^{-1} is symmetric, so g^T A^{-1} = u^T
        self.a_inv.ger(-1.0 / denom, &u, &u, 1.0);
        self.updates += 1;
        Ok(())
    }

    /// Extreme eigenvalues `(lambda_min(A), lambda_max(A))`.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        let sym = (&self.a_inv + self.a_inv.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (1.0 / hi, 1.0 / lo)
    }
}

/// Step-size rule for weight-space steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// `min(cap, scale * (2t + 1) / (t + 1)^2)` at step `t` (0-based).
    Diminishing {
        cap: f64,
        scale: f64,
    },
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Diminishing { cap, scale } => {
                let t = t as f64;
                cap.min(scale * (2.0 * t + 1.0) / ((t + 1.0) * (t + 1.0)))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { eta } => eta > 0.0 && eta.is_finite(),
            StepSchedule::Diminishing { cap, scale } => cap > 0.0 && scale > 0.0 && cap.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid step schedule {self:?}")))
        }
    }
}

/// Weight-space state over a frozen dictionary, with the grid cross-Gram
/// `K_{D,U}` cached. `hessian == None` gives plain mirror descent.
#[derive(Debug, Clone)]
pub struct QuasiNewtonState {
    pub z: DualFunction,
    pub hessian: Option<HessianState>,
    pub schedule: StepSchedule,
    pub steps: u64,
    pub saturations: u64,
    k_grid: DMatrix<f64>,
    cell_volume: f64,
}

impl QuasiNewtonState {
    pub fn new(z: DualFunction, model: &PoissonModel, delta: f64, schedule: StepSchedule) -> Result<Self> {
        let h = HessianState::new(z.model_order(), delta)?;
        Self::build(z, model, Some(h), schedule)
    }

    /// Mirror descent on the weights: the quasi-Newton step with `A^{-1} = I`.
    pub fn mirror_descent(z: DualFunction, model: &PoissonModel, schedule: StepSchedule) -> Result<Self> {
        Self::build(z, model, None, schedule)
    }

    /// Resume from a stored inverse Hessian.
    pub fn with_hessian(
        z: DualFunction,
        model: &PoissonModel,
        hessian: Option<HessianState>,
        schedule: StepSchedule,
    ) -> Result<Self> {
        Self::build(z, model, hessian, schedule)
    }

    fn build(
        mut z: DualFunction,
        model: &PoissonModel,
        hessian: Option<HessianState>,
        schedule: StepSchedule,
    ) -> Result<Self> {
        schedule.validate()?;
        if z.map != MirrorMap::Kl {
            return Err(Error::InvalidArgument("weight-space steps run on the KL map".into()));
        }
        if z.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                found: z.dim(),
            });
        }
        if let Some(h) = &hessian {
            if h.dim() != z.model_order() {
                return Err(Error::DimensionMismatch {
                    expected: z.model_order(),
                    found: h.dim(),
                });
            }
        }
        z.dict.freeze();
        let k_grid = cross_gram(&z.kernel, &z.dict, model.grid());
        Ok(QuasiNewtonState {
            z,
            hessian,
            schedule,
            steps: 0,
            saturations: 0,
            k_grid,
            cell_volume: model.cell_volume(),
        })
    }

    /// Batch-averaged weight gradient `-mean_b k_D(x_b) + h K_DU exp(K_DU^T w)`.
    pub fn gradient(&self, batch: &[Vec<f64>]) -> Result<(DVector<f64>, usize)> {
        check_batch(batch)?;
        let w = self.z.weight_vector();
        let zu = self.k_grid.tr_mul(&w);
        let mut clamped = 0;
        let eu = zu.map(|v| {
            let (f, c) = MirrorMap::Kl.grad_conj_clamped(v);
            clamped += c as usize;
            f
        });
        let mut g = &self.k_grid * eu * self.cell_volume;
        let inv_b = 1.0 / batch.len() as f64;
        for x in batch {
            let kx = kernel_vector(&self.z.kernel, &self.z.dict, x)?;
            g.axpy(-inv_b, &kx, 1.0);
        }
        Ok((g, clamped))
    }
}

/// `A <- A + g g^T` (Sherman-Morrison), then `w <- w - eta_t A^{-1} g`.
/// Returns the step size used.
pub fn quasi_newton_step(state: &mut QuasiNewtonState, batch: &[Vec<f64>]) -> Result<f64> {
    let (g, clamped) = state.gradient(batch)?;
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite weight gradient".into()));
    }
    let eta = state.schedule.at(state.steps);
    let dir = match &mut state.hessian {
        Some(h) => {
            h.sherman_morrison_update(&g)?;
            h.apply(&g)
        }
        None => g,
    };
    for (w, d) in state.z.weights.iter_mut().zip(dir.iter()) {
        *w -= eta * d;
    }
    state.steps += 1;
    state.saturations += clamped as u64;
    Ok(eta)
}

/// Mirror descent on the weights; errors if the state carries a Hessian.
pub fn pmd_step(state: &mut QuasiNewtonState, batch: &[Vec<f64>]) -> Result<f64> {
    if state.hessian.is_some() {
        return Err(Error::InvalidArgument(
            "mirror descent state must not carry a Hessian".into(),
        ));
    }
    quasi_newton_step(state, batch)
}

/// Settings for the two-phase hybrid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridSettings {
    pub functional_eta: f64,
    pub newton_schedule: StepSchedule,
    pub budget: BudgetPolicy,
    pub delta: f64,
    pub functional_batch: usize,
    pub newton_batch: usize,
    pub stability_window: usize,
}

#[derive(Debug, Clone)]
enum HybridPhase {
    Functional(SpppotState),
    Newton(QuasiNewtonState),
}

/// Functional steps until the model order is unchanged for
/// `stability_window` consecutive steps, then quasi-Newton on the frozen
/// dictionary starting from the current weights.
#[derive(Debug, Clone)]
pub struct HybridState {
    phase: HybridPhase,
    settings: HybridSettings,
    model: PoissonModel,
    unchanged: usize,
    last_order: usize,
    switch_step: Option<u64>,
    steps: u64,
}

/// Which phase produced a hybrid step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HybridStep {
    Functional(StepReport),
    Newton { eta: f64 },
}

impl HybridState {
    pub fn new(z0: DualFunction, model: PoissonModel, settings: HybridSettings) -> Result<Self> {
        if settings.functional_batch == 0 || settings.newton_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if settings.stability_window == 0 {
            return Err(Error::InvalidArgument("stability window must be positive".into()));
        }
        if !(settings.delta > 0.0) {
            return Err(Error::InvalidArgument("delta must be > 0".into()));
        }
        settings.newton_schedule.validate()?;
        let last_order = z0.model_order();
        let st = SpppotState::new(Expansion::from_dual(&z0), settings.functional_eta, settings.budget)?;
        Ok(HybridState {
            phase: HybridPhase::Functional(st),
            settings,
            model,
            unchanged: 0,
            last_order,
            switch_step: None,
            steps: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        match self.phase {
            HybridPhase::Functional(_) => self.settings.functional_batch,
            HybridPhase::Newton(_) => self.settings.newton_batch,
        }
    }

    pub fn in_newton_phase(&self) -> bool {
        matches!(self.phase, HybridPhase::Newton(_))
    }

    /// Total steps at which the dictionary was frozen.
    pub fn switch_step(&self) -> Option<u64> {
        self.switch_step
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn dual(&self) -> DualFunction {
        match &self.phase {
            HybridPhase::Functional(s) => s.dual(),
            HybridPhase::Newton(q) => q.z.clone(),
        }
    }

    pub fn saturations(&self) -> u64 {
        match &self.phase {
            HybridPhase::Functional(s) => s.saturations,
            HybridPhase::Newton(q) => q.saturations,
        }
    }

    pub fn functional_state(&self) -> Option<&SpppotState> {
        match &self.phase {
            HybridPhase::Functional(s) => Some(s),
            HybridPhase::Newton(_) => None,
        }
    }

    pub fn newton_state(&self) -> Option<&QuasiNewtonState> {
        match &self.phase {
            HybridPhase::Functional(_) => None,
            HybridPhase::Newton(q) => Some(q),
        }
    }

    pub fn step(&mut self, batch: &[Vec<f64>]) -> Result<HybridStep> {
        self.steps += 1;
        match &mut self.phase {
            HybridPhase::Functional(s) => {
                let rep = spppot_step(s, batch, &self.model)?;
                if rep.model_order == self.last_order {
                    self.unchanged += 1;
                } else {
                    self.unchanged = 0;
                    self.last_order = rep.model_order;
                }
                if self.unchanged >= self.settings.stability_window {
                    self.freeze()?;
                }
                Ok(HybridStep::Functional(rep))
            }
            HybridPhase::Newton(q) => Ok(HybridStep::Newton {
                eta: quasi_newton_step(q, batch)?,
            }),
        }
    }

    /// Freeze the current dictionary and switch to quasi-Newton steps now.
    pub fn freeze(&mut self) -> Result<()> {
        if let HybridPhase::Functional(s) = &self.phase {
            let z = s.dual();
            let q = QuasiNewtonState::new(z, &self.model, self.settings.delta, self.settings.newton_schedule)?;
            self.phase = HybridPhase::Newton(q);
            self.switch_step = Some(self.steps);
        }
        Ok(())
    }
}

/// Outcome of [`hybrid_run`].
#[derive(Debug, Clone)]
pub struct HybridOutcome {
    pub z: DualFunction,
    pub switch_step: Option<u64>,
    pub steps: u64,
    /// The stream ended before the model order settled.
    pub never_stabilized: bool,
}

/// Run the hybrid over `stream` in order, consuming phase-sized batches. A
/// trailing partial batch is dropped.
pub fn hybrid_run(
    z0: DualFunction,
    stream: &[Vec<f64>],
    model: &PoissonModel,
    settings: HybridSettings,
) -> Result<HybridOutcome> {
    let mut st = HybridState::new(z0, model.clone(), settings)?;
    let mut pos = 0;
    loop {
        let b = st.batch_size();
        if pos + b > stream.len() {
            break;
        }
        st.step(&stream[pos..pos + b])?;
        pos += b;
    }
    Ok(HybridOutcome {
        z: st.dual(),
        switch_step: st.switch_step(),
        steps: st.steps(),
        never_stabilized: !st.in_newton_phase(),
    })
}

/// Dual averaging: `h` accumulates raw pseudo-gradients, the primal is
/// `grad psi*(-eta h)`. Compression runs on the accumulator.
#[derive(Debug, Clone)]
pub struct DualAveragingState {
    pub h: Expansion,
    pub eta: f64,
    pub budget: BudgetPolicy,
    pub steps: u64,
    pub saturations: u64,
}

impl DualAveragingState {
    pub fn new(h: Expansion, eta: f64, budget: BudgetPolicy) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {eta}")));
        }
        Ok(DualAveragingState {
            h,
            eta,
            budget,
            steps: 0,
            saturations: 0,
        })
    }

    /// The dual iterate `-eta h`.
    pub fn dual_iterate(&self) -> Expansion {
        let mut z = self.h.clone();
        z.weights *= -self.eta;
        z
    }
}

/// `h~ = h + mean_b g_b` with `g_b` evaluated at `grad psi*(-eta h)`, then KOMP on `h~`.
pub fn dual_averaging_step<O: Objective>(
    state: &mut DualAveragingState,
    batch: &[O::Sample],
    obj: &O,
) -> Result<StepReport> {
    let epsilon = state.budget.epsilon(state.eta);
    let (g, clamped) = batch_gradient(obj, &state.h, -state.eta, batch)?;
    let pre = add_pseudo_gradient(&state.h, &g, 1.0)?;
    check_finite(&pre)?;
    let (next, residual) = compress(&pre, epsilon)?;
    state.h = next;
    state.budget.update(state.h.model_order());
    state.steps += 1;
    state.saturations += clamped as u64;
    Ok(StepReport {
        epsilon,
        residual,
        model_order: state.h.model_order(),
        clamped,
    })
}

/// Maximum `|z|` over the grid; useful to anticipate saturation.
pub fn max_abs_dual(z: &DualFunction, points: &Dictionary) -> f64 {
    points.atoms().map(|p| z.dual_unchecked(p).abs()).fold(0.0, f64::max)
}

/// Whether any dual value on `points` exceeds the clamp range.
pub fn saturates(z: &DualFunction, points: &Dictionary) -> bool {
    max_abs_dual(z, points) > DUAL_CLAMP
}

/// Exact position of a ChaCha stream, restorable bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::config("rng.word_pos", format!("not an integer: {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// On-disk form of a multi-output expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRepr {
    pub kernel: Kernel,
    pub map: MirrorMap,
    pub atoms: Vec<Vec<f64>>,
    /// One row per atom, one entry per output.
    pub weights: Vec<Vec<f64>>,
    pub fixed_mask: Vec<bool>,
}

impl From<&Expansion> for ExpansionRepr {
    fn from(e: &Expansion) -> Self {
        ExpansionRepr {
            kernel: e.kernel,
            map: e.map,
            atoms: e.dict.atoms().map(<[f64]>::to_vec).collect(),
            weights: (0..e.model_order())
                .map(|n| e.weights.row(n).iter().copied().collect())
                .collect(),
            fixed_mask: e.dict.fixed_mask().to_vec(),
        }
    }
}

impl TryFrom<&ExpansionRepr> for Expansion {
    type Error = Error;

    fn try_from(r: &ExpansionRepr) -> Result<Self> {
        let n = r.atoms.len();
        if r.weights.len() != n || r.fixed_mask.len() != n {
            return Err(Error::config(
                "checkpoint",
                "atoms, weights and fixed_mask must have equal length",
            ));
        }
        let outputs = r.weights.first().map_or(1, Vec::len);
        if r.weights.iter().any(|row| row.len() != outputs) {
            return Err(Error::config("checkpoint.weights", "ragged weight rows"));
        }
        let mut dict = Dictionary::new(r.atoms.first().map_or(1, Vec::len));
        for (a, f) in r.atoms.iter().zip(&r.fixed_mask) {
            dict.push(a, *f)?;
        }
        let w = DMatrix::from_fn(n, outputs, |i, c| r.weights[i][c]);
        Expansion::new(r.kernel, r.map, dict, w)
    }
}

/// Resumable optimizer snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub function: ExpansionRepr,
    /// Row-major inverse Hessian, if any.
    pub a_inv: Option<Vec<f64>>,
    pub hessian_updates: u64,
    pub budget: Option<BudgetPolicy>,
    pub steps: u64,
    pub saturations: u64,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_spppot(s: &SpppotState, rng: Option<&ChaCha8Rng>) -> Self {
        Checkpoint {
            function: ExpansionRepr::from(&s.z),
            a_inv: None,
            hessian_updates: 0,
            budget: Some(s.budget),
            steps: s.steps,
            saturations: s.saturations,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn from_newton(q: &QuasiNewtonState, rng: Option<&ChaCha8Rng>) -> Self {
        Checkpoint {
            function: ExpansionRepr::from(&Expansion::from_dual(&q.z)),
            a_inv: q.hessian.as_ref().map(|h| {
                let m = h.inverse();
                (0..m.nrows())
                    .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
                    .collect()
            }),
            hessian_updates: q.hessian.as_ref().map_or(0, HessianState::updates),
            budget: None,
            steps: q.steps,
            saturations: q.saturations,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn restore_spppot(&self, eta: f64) -> Result<SpppotState> {
        let budget = self
            .budget
            .ok_or_else(|| Error::config("checkpoint.budget", "missing for a functional state"))?;
        let mut s = SpppotState::new(Expansion::try_from(&self.function)?, eta, budget)?;
        s.steps = self.steps;
        s.saturations = self.saturations;
        Ok(s)
    }

    pub fn restore_newton(&self, model: &PoissonModel, schedule: StepSchedule) -> Result<QuasiNewtonState> {
        let z = Expansion::try_from(&self.function)?.output(0);
        let m = z.model_order();
        let hessian = match &self.a_inv {
            Some(v) => {
                if v.len() != m * m {
                    return Err(Error::config("checkpoint.a_inv", "size does not match the dictionary"));
                }
                Some(HessianState::from_inverse(
                    DMatrix::from_row_slice(m, m, v),
                    self.hessian_updates,
                )?)
            }
            None => None,
        };
        let mut q = QuasiNewtonState::with_hessian(z, model, hessian, schedule)?;
        q.steps = self.steps;
        q.saturations = self.saturations;
        Ok(q)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GridSpec, KlrModel, LabeledPoint};
    use crate::rkhs::{expansion_norm_diff, rkhs_norm_diff};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn model(n: usize) -> PoissonModel {
        PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 1.0)],
            points_per_dim: vec![n],
        })
        .unwrap()
    }

    fn gauss(c: f64) -> Kernel {
        Kernel::gaussian(c).unwrap()
    }

    fn start(m: &PoissonModel, c: f64, map: MirrorMap) -> Expansion {
        Expansion::from_dual(&m.grid_function(gauss(c), map, 0.0))
    }

    #[test]
    fn zero_budget_step_matches_hand_update() {
        let m = model(4);
        let mut st = SpppotState::new(
            start(&m, 0.02, MirrorMap::Kl),
            0.1,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        let batch = vec![vec![0.3], vec![0.61]];
        let rep = spppot_step(&mut st, &batch, &m).unwrap();
        assert_eq!(rep.model_order, 6);
        // f = exp(0) = 1 everywhere, so each new atom gets eta / B
        let z = st.dual();
        for i in 0..4 {
            assert_relative_eq!(z.weights[i], -0.1 * 0.25, epsilon = 1e-9);
        }
        assert_relative_eq!(z.weights[4], 0.05, epsilon = 1e-9);
        assert_relative_eq!(z.weights[5], 0.05, epsilon = 1e-9);
        assert_eq!(z.dict.atom(5), &[0.61]);
        assert!(!z.dict.is_fixed(4));
        assert_eq!(st.steps, 1);
    }

    #[test]
    fn repeated_point_merges_into_existing_atom() {
        let m = model(3);
        let mut st = SpppotState::new(
            start(&m, 0.05, MirrorMap::Kl),
            0.1,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        spppot_step(&mut st, &[vec![0.4]], &m).unwrap();
        let f = st.dual().evaluate_primal(&[0.4]).unwrap();
        spppot_step(&mut st, &[vec![0.4]], &m).unwrap();
        assert_eq!(st.z.model_order(), 4);
        assert_relative_eq!(st.z.weights[(3, 0)], 0.1 + 0.1 / f, epsilon = 1e-9);
    }

    #[test]
    fn step_respects_budget_and_keeps_grid() {
        let m = model(10);
        let mut st = SpppotState::new(
            start(&m, 0.01, MirrorMap::Kl),
            0.05,
            BudgetPolicy::constant(1e-3).unwrap(),
        )
        .unwrap();
        st.keep_pre_compression = true;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let batch: Vec<Vec<f64>> = (0..5).map(|_| vec![0.3 + 0.4 * rng.random::<f64>()]).collect();
            let rep = spppot_step(&mut st, &batch, &m).unwrap();
            let pre = st.pre_compression.as_ref().unwrap();
            let gap = expansion_norm_diff(pre, &st.z).unwrap();
            assert!(gap <= 1e-3 + 1e-9, "gap {gap}");
            assert!(rep.residual <= 1e-3);
            for i in 0..10 {
                assert!(st.z.dict.is_fixed(i));
                assert_eq!(st.z.dict.atom(i), m.grid().atom(i));
            }
        }
    }

    #[test]
    fn polk_requires_squared_norm() {
        let m = model(3);
        let mut st = SpppotState::new(
            start(&m, 0.05, MirrorMap::Kl),
            0.1,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        assert!(polk_step(&mut st, &[vec![0.5]], &m).is_err());
        let mut sq = SpppotState::new(
            start(&m, 0.05, MirrorMap::SquaredNorm),
            0.1,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        polk_step(&mut sq, &[vec![0.45]], &m).unwrap();
        // f = 0 is floored, so the coefficient is eta / floor
        assert_relative_eq!(sq.z.weights[(3, 0)], 0.1 / m.positivity_floor(), epsilon = 1e-6);
        assert!(spppot_step(&mut sq, &[], &m).is_err());
    }

    #[test]
    fn sherman_morrison_matches_explicit_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut h = HessianState::new(6, 0.5).unwrap();
        let mut a = DMatrix::identity(6, 6) * 0.5;
        for _ in 0..20 {
            let g = DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5);
            h.sherman_morrison_update(&g).unwrap();
            a += &g * g.transpose();
        }
        let inv = a.clone().try_inverse().unwrap();
        assert!((h.inverse() - &inv).abs().max() < 1e-10);
        let (lo, hi) = h.curvature_bounds();
        let eig = SymmetricEigen::new(a).eigenvalues;
        assert_relative_eq!(lo, eig.min(), max_relative = 1e-8);
        assert_relative_eq!(hi, eig.max(), max_relative = 1e-8);
        assert_eq!(h.updates(), 20);
    }

    #[test]
    fn sherman_morrison_rolls_back_on_bad_denominator() {
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let mut h = HessianState::from_inverse(bad.clone(), 0).unwrap();
        let g = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            h.sherman_morrison_update(&g),
            Err(Error::NumericalBreakdown(_))
        ));
        assert_eq!(h.inverse(), &bad);
        assert!(HessianState::new(3, 0.0).is_err());
        let mut ok = HessianState::new(3, 1.0).unwrap();
        assert!(ok.sherman_morrison_update(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn diminishing_schedule() {
        let s = StepSchedule::Diminishing { cap: 0.5, scale: 1.0 };
        assert_eq!(s.at(0), 0.5);
        assert_relative_eq!(s.at(1), 0.75f64.min(0.5));
        assert_relative_eq!(s.at(9), 19.0 / 100.0);
        assert_eq!(StepSchedule::Constant { eta: 0.3 }.at(1000), 0.3);
    }

    #[test]
    fn newton_gradient_matches_model_gradient() {
        let m = model(8);
        let z = m.grid_function(gauss(0.02), MirrorMap::Kl, -0.01);
        let q = QuasiNewtonState::new(z.clone(), &m, 1.0, StepSchedule::Constant { eta: 1.0 }).unwrap();
        let batch = vec![vec![0.2], vec![0.7]];
        let (g, _) = q.gradient(&batch).unwrap();
        let g0 = crate::models::poisson_pseudo_gradient_weights(&z, &batch[0], &m).unwrap();
        let g1 = crate::models::poisson_pseudo_gradient_weights(&z, &batch[1], &m).unwrap();
        let avg = (g0 + g1) * 0.5;
        assert!((g - avg).abs().max() < 1e-12);
    }

    #[test]
    fn newton_step_updates_hessian_before_weights() {
        let m = model(5);
        let z = m.grid_function(gauss(0.05), MirrorMap::Kl, -0.01);
        let mut q = QuasiNewtonState::new(z.clone(), &m, 2.0, StepSchedule::Constant { eta: 0.7 }).unwrap();
        let x = vec![vec![0.45]];
        let (g, _) = q.gradient(&x).unwrap();
        let a = DMatrix::identity(5, 5) * 2.0 + &g * g.transpose();
        let dir = a.try_inverse().unwrap() * &g;
        quasi_newton_step(&mut q, &x).unwrap();
        for i in 0..5 {
            assert_relative_eq!(q.z.weights[i], z.weights[i] - 0.7 * dir[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn mirror_descent_is_newton_with_identity() {
        let m = model(5);
        let z = m.grid_function(gauss(0.05), MirrorMap::Kl, -0.01);
        let mut p = QuasiNewtonState::mirror_descent(z.clone(), &m, StepSchedule::Constant { eta: 0.3 }).unwrap();
        let x = vec![vec![0.45], vec![0.5]];
        let (g, _) = p.gradient(&x).unwrap();
        pmd_step(&mut p, &x).unwrap();
        for i in 0..5 {
            assert_relative_eq!(p.z.weights[i], z.weights[i] - 0.3 * g[i], epsilon = 1e-15);
        }
        let mut q = QuasiNewtonState::new(z, &m, 1.0, StepSchedule::Constant { eta: 0.3 }).unwrap();
        assert!(pmd_step(&mut q, &x).is_err());
    }

    #[test]
    fn hybrid_freezes_after_stable_window() {
        let m = model(6);
        let z0 = m.grid_function(gauss(0.02), MirrorMap::Kl, 0.0);
        let settings = HybridSettings {
            functional_eta: 0.05,
            newton_schedule: StepSchedule::Constant { eta: 0.5 },
            budget: BudgetPolicy::constant(1e9).unwrap(),
            delta: 1.0,
            functional_batch: 3,
            newton_batch: 1,
            stability_window: 4,
        };
        let stream: Vec<Vec<f64>> = (0..40).map(|i| vec![0.3 + 0.01 * i as f64]).collect();
        let out = hybrid_run(z0.clone(), &stream, &m, settings).unwrap();
        // a huge budget prunes every new atom, so the order never changes
        assert_eq!(out.switch_step, Some(4));
        assert!(!out.never_stabilized);
        assert_eq!(out.z.model_order(), 6);
        assert!(out.z.dict.fixed_mask().iter().all(|f| *f));
        assert_eq!(out.steps, 4 + (40 - 12));

        let short = hybrid_run(z0, &stream[..6], &m, settings).unwrap();
        assert!(short.never_stabilized);
        assert_eq!(short.switch_step, None);
    }

    #[test]
    fn squared_norm_dual_averaging_is_gradient_accumulation() {
        let m = model(4);
        let eta = 0.2;
        let h0 = start(&m, 0.03, MirrorMap::SquaredNorm);
        let mut st = DualAveragingState::new(h0.clone(), eta, BudgetPolicy::constant(0.0).unwrap()).unwrap();
        let stream = [vec![0.2], vec![0.55], vec![0.8]];
        // oracle: accumulate the pseudo-gradients in the same order
        let mut acc = h0;
        for x in &stream {
            let f = -eta * acc.dual_at(x).unwrap()[0];
            let g = PseudoGradient {
                atoms: vec![(x.clone(), vec![-1.0 / f.max(m.positivity_floor())])],
                grid: m.grid_term(),
            };
            acc = add_pseudo_gradient(&acc, &g, 1.0).unwrap();
            dual_averaging_step(&mut st, std::slice::from_ref(x), &m).unwrap();
        }
        assert_eq!(st.h.weights, acc.weights);
        assert_eq!(st.h.dict, acc.dict);
    }

    #[test]
    fn kl_dual_averaging_matches_spppot_without_compression() {
        let m = model(5);
        let eta = 0.1;
        let mut da = DualAveragingState::new(
            start(&m, 0.03, MirrorMap::Kl),
            eta,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        let mut sp = SpppotState::new(
            start(&m, 0.03, MirrorMap::Kl),
            eta,
            BudgetPolicy::constant(0.0).unwrap(),
        )
        .unwrap();
        for x in [[0.3], [0.52], [0.71]] {
            dual_averaging_step(&mut da, &[x.to_vec()], &m).unwrap();
            spppot_step(&mut sp, &[x.to_vec()], &m).unwrap();
        }
        let gap = rkhs_norm_diff(&da.dual_iterate().output(0), &sp.dual()).unwrap();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn klr_step_uses_all_outputs() {
        let obj = KlrModel::new(3).unwrap();
        let e = Expansion::zeros(gauss(0.5), MirrorMap::SquaredNorm, Dictionary::new(2), 3);
        let mut st = SpppotState::new(e, 0.5, BudgetPolicy::constant(0.0).unwrap()).unwrap();
        let batch = vec![LabeledPoint {
            x: vec![0.0, 1.0],
            label: 2,
        }];
        spppot_step(&mut st, &batch, &obj).unwrap();
        let row: Vec<f64> = st.z.weights.row(0).iter().copied().collect();
        let third = 1.0 / 3.0;
        assert_relative_eq!(row[0], -0.5 * third, epsilon = 1e-15);
        assert_relative_eq!(row[2], -0.5 * (third - 1.0), epsilon = 1e-15);
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let m = model(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut st = SpppotState::new(
            start(&m, 0.02, MirrorMap::Kl),
            0.05,
            BudgetPolicy::adaptive(1e-3, 8).unwrap(),
        )
        .unwrap();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..3).map(|_| vec![rng.random::<f64>()]).collect()
        };
        for _ in 0..5 {
            let b = draw(&mut rng);
            spppot_step(&mut st, &b, &m).unwrap();
        }
        let json = Checkpoint::from_spppot(&st, Some(&rng)).to_json().unwrap();
        let ck = Checkpoint::from_json(&json).unwrap();
        let mut st2 = ck.restore_spppot(0.05).unwrap();
        let mut rng2 = ck.rng.as_ref().unwrap().restore().unwrap();
        for _ in 0..5 {
            let b1 = draw(&mut rng);
            let b2 = draw(&mut rng2);
            assert_eq!(b1, b2);
            spppot_step(&mut st, &b1, &m).unwrap();
            spppot_step(&mut st2, &b2, &m).unwrap();
        }
        assert_eq!(st.z, st2.z);
        assert_eq!(st.budget, st2.budget);

        let z = m.grid_function(gauss(0.02), MirrorMap::Kl, -0.01);
        let mut q = QuasiNewtonState::new(z, &m, 1.0, StepSchedule::Constant { eta: 0.5 }).unwrap();
        quasi_newton_step(&mut q, &[vec![0.4]]).unwrap();
        let ck = Checkpoint::from_json(&Checkpoint::from_newton(&q, None).to_json().unwrap()).unwrap();
        let mut q2 = ck.restore_newton(&m, q.schedule).unwrap();
        quasi_newton_step(&mut q, &[vec![0.6]]).unwrap();
        quasi_newton_step(&mut q2, &[vec![0.6]]).unwrap();
        assert_eq!(q.z.weights, q2.z.weights);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn inverse_hessian_stays_positive_definite(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut h = HessianState::new(n, 1.0).unwrap();
            for _ in 0..15 {
                let g = DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
                h.sherman_morrison_update(&g).unwrap();
            }
            let (lo, _) = h.curvature_bounds();
            prop_assert!(lo >= 1.0 - 1e-9);
        }

        #[test]
        fn grid_atoms_are_never_pruned(seed in 0u64..500, eps in 0.0f64..0.5) {
            let m = model(5);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut st = SpppotState::new(start(&m, 0.01, MirrorMap::Kl), 0.1, BudgetPolicy::constant(eps).unwrap()).unwrap();
            for _ in 0..4 {
                let b: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random::<f64>()]).collect();
                spppot_step(&mut st, &b, &m).unwrap();
                prop_assert!(st.z.model_order() >= 5);
                for i in 0..5 {
                    prop_assert!(st.z.dict.is_fixed(i));
                }
            }
        }
    }
}
