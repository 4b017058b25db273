//! Sparse dual-function representation, mirror maps and RKHS norms.
//!
//! A [`DualFunction`] stores the dual iterate `z = sum_n w_n k(d_n, .)`. The
//! primal estimate is recovered pointwise through the conjugate gradient map of
//! the [`MirrorMap`]: `f(x) = exp(z(x))` under KL, `f(x) = z(x)` under the
//! squared norm.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, kernel_vector, Dictionary, Kernel};

/// Dual values beyond this magnitude are clamped before exponentiation.
pub const DUAL_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorMap {
    /// Negative entropy potential; keeps the primal strictly positive.
    Kl,
    /// Half squared norm; dual and primal coincide.
    SquaredNorm,
}

impl MirrorMap {
    /// Pointwise gradient of the potential (primal to dual).
    pub fn grad(self, f: f64) -> f64 {
        match self {
            MirrorMap::Kl => f.ln(),
            MirrorMap::SquaredNorm => f,
        }
    }

    /// Pointwise conjugate gradient (dual to primal).
    pub fn grad_conj(self, z: f64) -> f64 {
        match self {
            MirrorMap::Kl => z.exp(),
            MirrorMap::SquaredNorm => z,
        }
    }

    /// Conjugate gradient with the dual value clamped to `[-DUAL_CLAMP, DUAL_CLAMP]`
    /// under KL. The flag reports whether clamping happened.
    pub fn grad_conj_clamped(self, z: f64) -> (f64, bool) {
        match self {
            MirrorMap::Kl => {
                let c = z.clamp(-DUAL_CLAMP, DUAL_CLAMP);
                (c.exp(), c != z)
            }
            MirrorMap::SquaredNorm => (z, false),
        }
    }
}

/// Dual iterate over a sparse dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFunction {
    pub kernel: Kernel,
    pub map: MirrorMap,
    pub dict: Dictionary,
    pub weights: Vec<f64>,
}

impl DualFunction {
    pub fn new(kernel: Kernel, map: MirrorMap, dict: Dictionary, weights: Vec<f64>) -> Result<Self> {
        if dict.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: dict.len(),
                found: weights.len(),
            });
        }
        Ok(DualFunction {
            kernel,
            map,
            dict,
            weights,
        })
    }

    /// The zero function over `dict` (all weights 0).
    pub fn zeros(kernel: Kernel, map: MirrorMap, dict: Dictionary) -> Self {
        let n = dict.len();
        DualFunction {
            kernel,
            map,
            dict,
            weights: vec![0.0; n],
        }
    }

    pub fn model_order(&self) -> usize {
        self.dict.len()
    }

    pub fn dim(&self) -> usize {
        self.dict.dim()
    }

    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    /// `z(x) = w^T k_D(x)`.
    pub fn evaluate_dual(&self, x: &[f64]) -> Result<f64> {
        self.dict.check_point(x)?;
        Ok(self.dual_unchecked(x))
    }

    #[inline]
    pub(crate) fn dual_unchecked(&self, x: &[f64]) -> f64 {
        self.dict
            .atoms()
            .zip(&self.weights)
            .map(|(a, w)| w * self.kernel.eval_unchecked(a, x))
            .sum()
    }

    /// `f(x)` through the conjugate gradient map. Under KL a dual value above
    /// `DUAL_CLAMP` is a saturation error; values below `-DUAL_CLAMP` are clamped
    /// so the result stays strictly positive.
    pub fn evaluate_primal(&self, x: &[f64]) -> Result<f64> {
        let z = self.evaluate_dual(x)?;
        if self.map == MirrorMap::Kl && z > DUAL_CLAMP {
            return Err(Error::Saturation(z));
        }
        Ok(self.map.grad_conj_clamped(z).0)
    }

    /// Primal values on many points, collecting the number of clamped evaluations.
    pub fn primal_clamped(&self, x: &[f64]) -> (f64, bool) {
        self.map.grad_conj_clamped(self.dual_unchecked(x))
    }

    /// `sqrt(w^T K w)`, with negative round-off clamped to zero.
    pub fn rkhs_norm(&self) -> f64 {
        let g = gram_matrix(&self.kernel, &self.dict);
        let w = self.weight_vector();
        w.dot(&(&g * &w)).max(0.0).sqrt()
    }

    /// JSON snapshot (`kernel`, `map`, `atoms`, `weights`, `fixed_mask`).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DualFunctionRepr::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: DualFunctionRepr = serde_json::from_str(s)?;
        repr.try_into()
    }
}

/// On-disk form of a [`DualFunction`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualFunctionRepr {
    pub kernel: Kernel,
    pub map: MirrorMap,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub fixed_mask: Vec<bool>,
}

impl From<&DualFunction> for DualFunctionRepr {
    fn from(z: &DualFunction) -> Self {
        DualFunctionRepr {
            kernel: z.kernel,
            map: z.map,
            atoms: z.dict.atoms().map(<[f64]>::to_vec).collect(),
            weights: z.weights.clone(),
            fixed_mask: z.dict.fixed_mask().to_vec(),
        }
    }
}

impl TryFrom<DualFunctionRepr> for DualFunction {
    type Error = Error;

    fn try_from(r: DualFunctionRepr) -> Result<Self> {
        if r.fixed_mask.len() != r.atoms.len() {
            return Err(Error::DimensionMismatch {
                expected: r.atoms.len(),
                found: r.fixed_mask.len(),
            });
        }
        let dim = r.atoms.first().map_or(1, Vec::len);
        let mut dict = Dictionary::new(dim);
        for (a, f) in r.atoms.iter().zip(&r.fixed_mask) {
            dict.push(a, *f)?;
        }
        DualFunction::new(r.kernel, r.map, dict, r.weights)
    }
}

fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

/// Signed combination `sum_i coeff_i * z_i` over the union of the dictionaries.
/// Bitwise-identical atoms are merged so shared atoms contribute their weight
/// difference directly.
pub fn merge_functions(parts: &[(f64, &DualFunction)]) -> Result<DualFunction> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no functions to merge".into()))?
        .1;
    let mut dict = Dictionary::new(first.dim());
    let mut weights = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for (c, z) in parts {
        if z.kernel != first.kernel {
            return Err(Error::KernelMismatch);
        }
        if !z.dict.is_empty() && !dict.is_empty() && z.dim() != dict.dim() {
            return Err(Error::DimensionMismatch {
                expected: dict.dim(),
                found: z.dim(),
            });
        }
        for (a, w) in z.dict.atoms().zip(&z.weights) {
            let key = point_key(a);
            match index.get(&key) {
                Some(&i) => weights[i] += c * w,
                None => {
                    index.insert(key, weights.len());
                    dict.push(a, false)?;
                    weights.push(c * w);
                }
            }
        }
    }
    DualFunction::new(first.kernel, first.map, dict, weights)
}

/// Several dual functions sharing one dictionary: row `n` of `weights` holds
/// atom `n`'s coefficient for every output. Scalar problems use one column.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub kernel: Kernel,
    pub map: MirrorMap,
    pub dict: Dictionary,
    pub weights: DMatrix<f64>,
}

impl Expansion {
    pub fn new(kernel: Kernel, map: MirrorMap, dict: Dictionary, weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() != dict.len() {
            return Err(Error::DimensionMismatch {
                expected: dict.len(),
                found: weights.nrows(),
            });
        }
        Ok(Expansion {
            kernel,
            map,
            dict,
            weights,
        })
    }

    pub fn zeros(kernel: Kernel, map: MirrorMap, dict: Dictionary, outputs: usize) -> Self {
        let n = dict.len();
        Expansion {
            kernel,
            map,
            dict,
            weights: DMatrix::zeros(n, outputs),
        }
    }

    pub fn from_dual(z: &DualFunction) -> Self {
        Expansion {
            kernel: z.kernel,
            map: z.map,
            dict: z.dict.clone(),
            weights: DMatrix::from_column_slice(z.weights.len(), 1, &z.weights),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn model_order(&self) -> usize {
        self.dict.len()
    }

    /// The scalar dual function of output `c`.
    pub fn output(&self, c: usize) -> DualFunction {
        DualFunction {
            kernel: self.kernel,
            map: self.map,
            dict: self.dict.clone(),
            weights: self.weights.column(c).iter().copied().collect(),
        }
    }

    /// Dual values of every output at `x`.
    pub fn dual_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.dict.check_point(x)?;
        let mut out = vec![0.0; self.outputs()];
        for (n, a) in self.dict.atoms().enumerate() {
            let k = self.kernel.eval_unchecked(a, x);
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.weights[(n, c)] * k;
            }
        }
        Ok(out)
    }

    /// Frobenius RKHS norm `sqrt(trace(W^T K W))`.
    pub fn rkhs_norm(&self) -> f64 {
        let g = gram_matrix(&self.kernel, &self.dict);
        let kw = &g * &self.weights;
        self.weights.dot(&kw).max(0.0).sqrt()
    }
}

/// `||e1 - e2||` summed over outputs, over the merged union dictionary.
pub fn expansion_norm_diff(e1: &Expansion, e2: &Expansion) -> Result<f64> {
    if e1.kernel != e2.kernel {
        return Err(Error::KernelMismatch);
    }
    if e1.outputs() != e2.outputs() {
        return Err(Error::DimensionMismatch {
            expected: e1.outputs(),
            found: e2.outputs(),
        });
    }
    let mut sq = 0.0;
    for c in 0..e1.outputs() {
        let d = rkhs_norm_diff(&e1.output(c), &e2.output(c))?;
        sq += d * d;
    }
    Ok(sq.sqrt())
}

/// `||z1 - z2||` in the RKHS, computed over the merged union dictionary.
pub fn rkhs_norm_diff(z1: &DualFunction, z2: &DualFunction) -> Result<f64> {
    if z1.kernel != z2.kernel {
        return Err(Error::KernelMismatch);
    }
    Ok(merge_functions(&[(1.0, z1), (-1.0, z2)])?.rkhs_norm())
}

/// Quadrature surrogate of the Bregman divergence between two functions given
/// by their values on a grid with cell weights `h`.
///
/// KL: `sum h_i f_i ln(f_i / g_i)`, nonnegative whenever `f` and `g` carry the
/// same quadrature mass. Squared norm: `0.5 sum h_i (f_i - g_i)^2`.
pub fn bregman_divergence(f: &[f64], g: &[f64], map: MirrorMap, h: &[f64]) -> Result<f64> {
    if f.len() != g.len() || f.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: f.len(),
            found: if g.len() != f.len() { g.len() } else { h.len() },
        });
    }
    match map {
        MirrorMap::Kl => {
            if let Some(v) = f.iter().chain(g).find(|v| !(**v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "KL divergence needs strictly positive values, got {v}"
                )));
            }
            Ok(f.iter()
                .zip(g)
                .zip(h)
                .map(|((fi, gi), hi)| hi * fi * (fi / gi).ln())
                .sum())
        }
        MirrorMap::SquaredNorm => Ok(0.5
            * f.iter()
                .zip(g)
                .zip(h)
                .map(|((fi, gi), hi)| hi * (fi - gi) * (fi - gi))
                .sum::<f64>()),
    }
}

/// Dual values `z(x)` on every point of `points`.
pub fn dual_values(z: &DualFunction, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|p| z.evaluate_dual(p)).collect()
}

/// `k_D(x)^T w` computed through an explicit kernel vector (used by tests and oracles).
pub fn dual_via_kernel_vector(z: &DualFunction, x: &[f64]) -> Result<f64> {
    Ok(kernel_vector(&z.kernel, &z.dict, x)?.dot(&z.weight_vector()))
}
