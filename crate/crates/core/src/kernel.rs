//! Kernel evaluation, empirical kernel maps and Gram matrices.
//!
//! Points are plain `&[f64]` slices. A [`Dictionary`] stores its atoms in one
//! flat row-major buffer so kernel maps over it stay cache friendly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive semidefinite kernel on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub enum Kernel {
    /// `exp(-|x - y|^2 / (2 c))` with variance-like bandwidth `c > 0`.
    Gaussian { bandwidth: f64 },
    /// `(x.y + offset)^degree`.
    Polynomial { offset: f64, degree: u32 },
}

#[derive(Serialize, Deserialize)]
struct KernelRepr {
    family: String,
    params: Vec<f64>,
}

impl From<Kernel> for KernelRepr {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Gaussian { bandwidth } => KernelRepr {
                family: "gaussian".into(),
                params: vec![bandwidth],
            },
            Kernel::Polynomial { offset, degree } => KernelRepr {
                family: "polynomial".into(),
                params: vec![offset, degree as f64],
            },
        }
    }
}

impl TryFrom<KernelRepr> for Kernel {
    type Error = String;

    fn try_from(r: KernelRepr) -> std::result::Result<Self, String> {
        match (r.family.as_str(), r.params.as_slice()) {
            ("gaussian", [c]) => Kernel::gaussian(*c).map_err(|e| e.to_string()),
            ("polynomial", [b, deg]) => {
                if deg.fract() != 0.0 || *deg < 1.0 {
                    return Err(format!("polynomial degree must be a positive integer, got {deg}"));
                }
                Kernel::polynomial(*b, *deg as u32).map_err(|e| e.to_string())
            }
            (f, p) => Err(format!("unknown kernel family `{f}` with {} params", p.len())),
        }
    }
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Kernel::Gaussian { bandwidth })
    }

    pub fn polynomial(offset: f64, degree: u32) -> Result<Self> {
        if !(offset >= 0.0) || degree == 0 {
            return Err(Error::InvalidArgument(format!(
                "polynomial kernel needs offset >= 0 and degree >= 1, got ({offset}, {degree})"
            )));
        }
        Ok(Kernel::Polynomial { offset, degree })
    }

    /// Kernel value without dimension checks. Callers guarantee `x.len() == y.len()`.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian { bandwidth } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * bandwidth)).exp()
            }
            Kernel::Polynomial { offset, degree } => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (dot + offset).powi(degree as i32)
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        Ok(self.eval_unchecked(x, y))
    }
}

/// Ordered atom set with a per-atom "fixed" flag. Fixed atoms (grid or
/// inducing points) are never removed by compression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    dim: usize,
    points: Vec<f64>,
    fixed: Vec<bool>,
}

impl Dictionary {
    pub fn new(dim: usize) -> Self {
        Dictionary {
            dim,
            points: Vec::new(),
            fixed: Vec::new(),
        }
    }

    pub fn from_points(points: &[Vec<f64>], fixed: bool) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        let mut d = Dictionary::new(dim);
        for p in points {
            d.push(p, fixed)?;
        }
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so route the zero-dimensional case through an empty slice
        let step = self.dim.max(1);
        let buf = if self.dim == 0 { &[][..] } else { &self.points[..] };
        buf.chunks_exact(step)
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        self.fixed[i]
    }

    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }

    pub fn num_fixed(&self) -> usize {
        self.fixed.iter().filter(|f| **f).count()
    }

    pub fn push(&mut self, point: &[f64], fixed: bool) -> Result<()> {
        if self.is_empty() && self.dim == 0 {
            self.dim = point.len();
        }
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: point.len(),
            });
        }
        self.points.extend_from_slice(point);
        self.fixed.push(fixed);
        Ok(())
    }

    /// Keeps the atoms at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dictionary {
        let mut out = Dictionary::new(self.dim);
        for &i in indices {
            out.points.extend_from_slice(self.atom(i));
            out.fixed.push(self.fixed[i]);
        }
        out
    }

    /// Marks every atom as fixed.
    pub fn freeze(&mut self) {
        self.fixed.iter_mut().for_each(|f| *f = true);
    }

    pub fn position(&self, point: &[f64]) -> Option<usize> {
        self.atoms().position(|a| a == point)
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<()> {
        if !self.is_empty() && x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }
}

/// Empirical kernel map `k_D(x)`: entry `i` is `k(atom_i, x)`.
pub fn kernel_vector(kernel: &Kernel, dict: &Dictionary, x: &[f64]) -> Result<DVector<f64>> {
    dict.check_point(x)?;
    Ok(DVector::from_iterator(
        dict.len(),
        dict.atoms().map(|a| kernel.eval_unchecked(a, x)),
    ))
}

/// Dense symmetric Gram matrix over the dictionary. Empty dictionaries give a 0x0 matrix.
pub fn gram_matrix(kernel: &Kernel, dict: &Dictionary) -> DMatrix<f64> {
    let n = dict.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        let ai = dict.atom(i);
        for j in i..n {
            let v = kernel.eval_unchecked(dict.atom(j), ai);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Cross Gram `K[i, j] = k(a_i, b_j)`.
pub fn cross_gram(kernel: &Kernel, a: &Dictionary, b: &Dictionary) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel.eval_unchecked(a.atom(i), b.atom(j)))
}

/// Silverman's rule of thumb for 1-D data, returned as the variance-like
/// Gaussian parameter `c = (1.06 * sd * n^(-1/5))^2`.
pub fn silverman_bandwidth(data: &[f64]) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Silverman's rule needs at least 2 points, got {n}"
        )));
    }
    if data.iter().all(|x| *x == data[0]) {
        return Err(Error::InvalidArgument("data has zero variance".into()));
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("data has zero variance".into()));
    }
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    Ok(h * h)
}
