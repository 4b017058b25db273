//! Destructive kernel orthogonal matching pursuit and the compression-budget
//! controller.
//!
//! Pruning works against the *original* input function `z~` for the whole
//! call: every candidate removal refits the surviving weights by least squares
//! against `z~`, and the cheapest removal is taken while its residual stays
//! within the budget. Refits are solved in correction form
//! `(K_S + jI) delta = K_{S,R} w~_R`, where `R` is the removed set, so the
//! residual `||sum_R w~ k - sum_S delta k||` never subtracts two large norms.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, Dictionary, Kernel};
use crate::rkhs::DualFunction;

/// Diagonal jitter added to reduced Gram matrices before factorization.
pub const GRAM_JITTER: f64 = 1e-10;

/// Candidate evaluation goes parallel above this many `candidates * |S|^2` flops.
const PAR_THRESHOLD: usize = 200_000;

/// Outcome of a pruning pass over a (possibly multi-output) expansion.
#[derive(Debug, Clone)]
pub struct Pruned {
    /// Indices of surviving atoms in the input dictionary, in input order.
    pub kept: Vec<usize>,
    /// Refit weights, one row per kept atom.
    pub weights: DMatrix<f64>,
    /// Norm of the difference between the input and the pruned function.
    pub residual: f64,
}

fn jittered_inverse(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let scale = if n == 0 { 1.0 } else { (k.trace() / n as f64).max(1.0) };
    let mut jitter = GRAM_JITTER * scale;
    for _ in 0..8 {
        let m = k + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = Cholesky::new(m) {
            return Ok(ch.inverse());
        }
        jitter *= 100.0;
    }
    Err(Error::NumericalBreakdown(
        "reduced Gram matrix is not positive definite even after jitter".into(),
    ))
}

/// `trace(A^T K[ia, ib] B)`; `a` and `b` hold the rows indexed by `ia`, `ib`.
fn quad(k: &DMatrix<f64>, ia: &[usize], a: &DMatrix<f64>, ib: &[usize], b: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let ks = k.as_slice();
    let (ra, rb) = (a.nrows(), b.nrows());
    let (sa, sb) = (a.as_slice(), b.as_slice());
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let ac = &sa[c * ra..(c + 1) * ra];
        let bc = &sb[c * rb..(c + 1) * rb];
        for (&j, &bq) in ib.iter().zip(bc) {
            let kcol = &ks[j * n..(j + 1) * n];
            let dot: f64 = ia.iter().zip(ac).map(|(&i, &ap)| ap * kcol[i]).sum();
            s += dot * bq;
        }
    }
    s
}

struct Candidate {
    residual: f64,
    delta: DMatrix<f64>,
}

/// State of one greedy pass.
struct Pass<'a> {
    gram: &'a DMatrix<f64>,
    w0: &'a DMatrix<f64>,
    /// Surviving atoms (indices into the input), ascending.
    active: Vec<usize>,
    removed: Vec<usize>,
    /// `(K_SS + jI)^{-1}` over `active`.
    inv: DMatrix<f64>,
}

impl<'a> Pass<'a> {
    fn new(gram: &'a DMatrix<f64>, w0: &'a DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        Ok(Pass {
            gram,
            w0,
            active: (0..n).collect(),
            removed: Vec::new(),
            inv: jittered_inverse(gram)?,
        })
    }

    fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.w0.ncols(), |r, c| self.w0[(idx[r], c)])
    }

    /// Residual and weight correction for removing the active atom at position `p`.
    fn evaluate(&self, p: usize, base_rhs: &DMatrix<f64>, removed_norm2: f64) -> Candidate {
        let j = self.active[p];
        let m = self.active.len();
        let cols = self.w0.ncols();
        let wj = self.w0.row(j);

        // rhs over S: K_{S,R} w~_R + K_{S,j} w~_j, with row p dropped (zeroed)
        let mut rhs = base_rhs.clone();
        for (r, &i) in self.active.iter().enumerate() {
            let kij = self.gram[(i, j)];
            for c in 0..cols {
                rhs[(r, c)] += kij * wj[c];
            }
        }
        rhs.row_mut(p).fill(0.0);

        // inverse of the reduced system via the Schur complement of the current inverse
        let u = &self.inv * &rhs;
        let mpp = self.inv[(p, p)];
        let mut delta = DMatrix::zeros(m - 1, cols);
        let mut idx = Vec::with_capacity(m - 1);
        for (r, &i) in self.active.iter().enumerate() {
            if r == p {
                continue;
            }
            let q = idx.len();
            let f = self.inv[(r, p)] / mpp;
            for c in 0..cols {
                delta[(q, c)] = u[(r, c)] - f * u[(p, c)];
            }
            idx.push(i);
        }

        // ||sum_{R+j} w~ k - sum_{S-j} delta k||^2
        let mut removed = self.removed.clone();
        removed.push(j);
        let wr = self.rows(&removed);
        let wj_mat = DMatrix::from_fn(1, cols, |_, c| wj[c]);
        let c_norm = removed_norm2
            + 2.0 * quad(self.gram, &[j], &wj_mat, &self.removed, &self.rows(&self.removed))
            + quad(self.gram, &[j], &wj_mat, &[j], &wj_mat);
        let cross = quad(self.gram, &idx, &delta, &removed, &wr);
        let dd = quad(self.gram, &idx, &delta, &idx, &delta);
        let r2 = c_norm - 2.0 * cross + dd;
        Candidate {
            residual: r2.max(0.0).sqrt(),
            delta,
        }
    }

    fn base_rhs(&self) -> DMatrix<f64> {
        let cols = self.w0.ncols();
        let mut b = DMatrix::zeros(self.active.len(), cols);
        for (r, &i) in self.active.iter().enumerate() {
            for &k in &self.removed {
                let kik = self.gram[(i, k)];
                for c in 0..cols {
                    b[(r, c)] += kik * self.w0[(k, c)];
                }
            }
        }
        b
    }

    fn remove(&mut self, p: usize) {
        let m = self.active.len();
        let mpp = self.inv[(p, p)];
        let keep: Vec<usize> = (0..m).filter(|&r| r != p).collect();
        let inv = DMatrix::from_fn(m - 1, m - 1, |a, b| {
            let (ra, rb) = (keep[a], keep[b]);
            self.inv[(ra, rb)] - self.inv[(ra, p)] * self.inv[(p, rb)] / mpp
        });
        self.inv = inv;
        self.removed.push(self.active.remove(p));
    }
}

/// Greedy KOMP over a multi-output expansion sharing one dictionary. Fixed
/// atoms are never removed. Returns the pruned function with
/// `||z - z~|| <= epsilon` (Frobenius over outputs).
pub fn komp_prune_weights(kernel: &Kernel, dict: &Dictionary, weights: &DMatrix<f64>, epsilon: f64) -> Result<Pruned> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "compression budget must be >= 0, got {epsilon}"
        )));
    }
    if weights.nrows() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            found: weights.nrows(),
        });
    }
    let n = dict.len();
    let all = Pruned {
        kept: (0..n).collect(),
        weights: weights.clone(),
        residual: 0.0,
    };
    if (0..n).all(|i| dict.is_fixed(i)) {
        return Ok(all);
    }
    let gram = gram_matrix(kernel, dict);
    let mut pass = Pass::new(&gram, weights)?;
    let mut residual = 0.0;
    let mut weights_out = weights.clone();
    let mut removed_norm2 = 0.0;

    loop {
        let positions: Vec<usize> = (0..pass.active.len())
            .filter(|&p| !dict.is_fixed(pass.active[p]))
            .collect();
        if positions.is_empty() {
            break;
        }
        let base = pass.base_rhs();
        let m = pass.active.len();
        let eval = |&p: &usize| pass.evaluate(p, &base, removed_norm2);
        let cands: Vec<Candidate> = if positions.len() * m * m > PAR_THRESHOLD {
            positions.par_iter().map(eval).collect()
        } else {
            positions.iter().map(eval).collect()
        };
        // lowest index wins ties
        let (best, cand) = cands
            .into_iter()
            .enumerate()
            .fold(None::<(usize, Candidate)>, |acc, (i, c)| match acc {
                Some((bi, bc)) if bc.residual <= c.residual => Some((bi, bc)),
                _ => Some((i, c)),
            })
            .expect("non-empty candidate set");
        if cand.residual > epsilon {
            break;
        }
        let p = positions[best];
        let j = pass.active[p];
        removed_norm2 += 2.0 * quad(&gram, &[j], &pass.rows(&[j]), &pass.removed, &pass.rows(&pass.removed))
            + quad(&gram, &[j], &pass.rows(&[j]), &[j], &pass.rows(&[j]));
        pass.remove(p);
        residual = cand.residual;
        let mut w = pass.rows(&pass.active);
        w += &cand.delta;
        weights_out = w;
    }

    if pass.removed.is_empty() {
        return Ok(all);
    }
    Ok(Pruned {
        kept: pass.active,
        weights: weights_out,
        residual,
    })
}

/// KOMP over a scalar dual function.
pub fn komp_prune(z: &DualFunction, epsilon: f64) -> Result<DualFunction> {
    let w = DMatrix::from_column_slice(z.weights.len(), 1, &z.weights);
    let pruned = komp_prune_weights(&z.kernel, &z.dict, &w, epsilon)?;
    DualFunction::new(
        z.kernel,
        z.map,
        z.dict.select(&pruned.kept),
        pruned.weights.column(0).iter().copied().collect(),
    )
}

/// Residual norm and least-squares refit for removing atom `j` from `z`.
///
/// The refit solves the normal equations `K_red w = K_{red,D} w~` in the
/// equivalent correction form `K_red (w - w~_red) = K_{red,j} w~_j`, so
/// removing a zero-weight atom leaves the remaining weights untouched.
pub fn removal_residual(z: &DualFunction, j: usize) -> Result<(f64, Vec<f64>)> {
    let n = z.model_order();
    if j >= n {
        return Err(Error::InvalidArgument(format!(
            "atom index {j} out of range for dictionary of size {n}"
        )));
    }
    if z.dict.is_fixed(j) {
        return Err(Error::InvalidArgument(format!("atom {j} is fixed")));
    }
    let gram = gram_matrix(&z.kernel, &z.dict);
    let w0 = DMatrix::from_column_slice(n, 1, &z.weights);
    let pass = Pass::new(&gram, &w0)?;
    let base = DMatrix::zeros(n, 1);
    let cand = pass.evaluate(j, &base, 0.0);
    let mut refit: Vec<f64> = (0..n).filter(|&i| i != j).map(|i| z.weights[i]).collect();
    for (r, v) in refit.iter_mut().enumerate() {
        *v += cand.delta[(r, 0)];
    }
    Ok((cand.residual, refit))
}

/// Compression budget: fixed, or `epsilon_t = alpha_t * eta` with `alpha`
/// steered toward a target model order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BudgetPolicy {
    Constant {
        epsilon: f64,
    },
    Adaptive {
        alpha: f64,
        target_order: usize,
        alpha_min: f64,
        alpha_max: f64,
    },
}

impl BudgetPolicy {
    pub fn constant(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(BudgetPolicy::Constant { epsilon })
    }

    /// Adaptive policy with the default clamp `[alpha0 / 100, alpha0 * 100]`.
    pub fn adaptive(alpha0: f64, target_order: usize) -> Result<Self> {
        if !(alpha0 > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha0}")));
        }
        Ok(BudgetPolicy::Adaptive {
            alpha: alpha0,
            target_order,
            alpha_min: alpha0 / 100.0,
            alpha_max: alpha0 * 100.0,
        })
    }

    pub fn epsilon(&self, eta: f64) -> f64 {
        match *self {
            BudgetPolicy::Constant { epsilon } => epsilon,
            BudgetPolicy::Adaptive { alpha, .. } => alpha * eta,
        }
    }

    /// Moves `alpha` by at most 10% toward the target model order
    /// (0.1% per atom of excess). No-op for a constant budget.
    pub fn update(&mut self, model_order: usize) {
        if let BudgetPolicy::Adaptive {
            alpha,
            target_order,
            alpha_min,
            alpha_max,
        } = self
        {
            let excess = model_order as f64 - *target_order as f64;
            let rate = (excess * 0.001).clamp(-0.1, 0.1);
            *alpha = (*alpha * (1.0 + rate)).clamp(*alpha_min, *alpha_max);
        }
    }
}
