//! Loss models: Poisson point-process likelihood over a quadrature grid and
//! multiclass kernel logistic regression.
//!
//! Both models expose their per-sample functional pseudo-gradients through the
//! [`Objective`] trait so the optimizers can share one update engine.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_vector, Dictionary, Kernel};
use crate::rkhs::{DualFunction, Expansion, MirrorMap, DUAL_CLAMP};

/// Lower bound on the primal value inside `ln f` and `1 / f` when the map does
/// not guarantee positivity.
pub const DEFAULT_POSITIVITY_FLOOR: f64 = 1e-3;

/// Functional pseudo-gradient `sum_n c_n k(x_n, .) + h sum_j k(u_j, .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGradient {
    /// Sample atoms with one coefficient per output.
    pub atoms: Vec<(Vec<f64>, Vec<f64>)>,
    /// Integral term on the leading grid atoms of the iterate (output 0 only).
    pub grid: Option<GridTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTerm {
    pub len: usize,
    pub coefficient: f64,
}

/// A loss whose pseudo-gradient at a sample depends only on the primal values
/// of the iterate at the sample point.
pub trait Objective: Sync {
    type Sample: Sync;

    fn outputs(&self) -> usize;

    fn point<'a>(&self, sample: &'a Self::Sample) -> &'a [f64];

    /// Derivative of the per-sample loss with respect to each output's primal value.
    fn sample_coefficients(&self, sample: &Self::Sample, primal: &[f64], map: MirrorMap) -> Vec<f64>;

    /// Sample-independent part of the pseudo-gradient.
    fn grid_term(&self) -> Option<GridTerm>;
}

/// Quadrature grid at cell centres of an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub points_per_dim: Vec<usize>,
}

/// Poisson likelihood `-ln f(x) + h sum_j f(u_j)` with the integral replaced by
/// a midpoint rule on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonModel {
    grid: Dictionary,
    cell_volume: f64,
    bounds: Vec<(f64, f64)>,
    positivity_floor: f64,
}

impl PoissonModel {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        let GridSpec { bounds, points_per_dim } = spec;
        if bounds.is_empty() || bounds.len() != points_per_dim.len() {
            return Err(Error::config(
                "grid",
                format!(
                    "need one point count per dimension, got {} bounds and {} counts",
                    bounds.len(),
                    points_per_dim.len()
                ),
            ));
        }
        let mut axes = Vec::with_capacity(bounds.len());
        let mut cell_volume = 1.0;
        for (&(lo, hi), &n) in bounds.iter().zip(points_per_dim) {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::config("grid.bounds", format!("empty interval [{lo}, {hi}]")));
            }
            if n == 0 {
                return Err(Error::config("grid.points_per_dim", "must be positive"));
            }
            let step = (hi - lo) / n as f64;
            cell_volume *= step;
            axes.push((0..n).map(|i| lo + (i as f64 + 0.5) * step).collect::<Vec<_>>());
        }
        let dim = axes.len();
        let mut grid = Dictionary::new(dim);
        let total: usize = points_per_dim.iter().product();
        let mut point = vec![0.0; dim];
        for flat in 0..total {
            let mut rem = flat;
            for d in (0..dim).rev() {
                let n = axes[d].len();
                point[d] = axes[d][rem % n];
                rem /= n;
            }
            grid.push(&point, true)?;
        }
        Ok(PoissonModel {
            grid,
            cell_volume,
            bounds: bounds.clone(),
            positivity_floor: DEFAULT_POSITIVITY_FLOOR,
        })
    }

    pub fn with_positivity_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::config("positivity_floor", "must be positive and finite"));
        }
        self.positivity_floor = floor;
        Ok(self)
    }

    pub fn grid(&self) -> &Dictionary {
        &self.grid
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn positivity_floor(&self) -> f64 {
        self.positivity_floor
    }

    /// Dual iterate whose dictionary is the fixed grid with every weight equal to `weight`.
    pub fn grid_function(&self, kernel: Kernel, map: MirrorMap, weight: f64) -> DualFunction {
        let n = self.grid.len();
        DualFunction {
            kernel,
            map,
            dict: self.grid.clone(),
            weights: vec![weight; n],
        }
    }

    /// Grid function whose primal value at the centre of the box is `level`.
    pub fn level_function(&self, kernel: Kernel, map: MirrorMap, level: f64) -> Result<DualFunction> {
        let centre: Vec<f64> = self.bounds.iter().map(|(a, b)| 0.5 * (a + b)).collect();
        let mass: f64 = self.grid.atoms().map(|u| kernel.eval_unchecked(u, &centre)).sum();
        if mass <= 0.0 {
            return Err(Error::InvalidArgument("grid kernel mass vanishes at the centre".into()));
        }
        Ok(self.grid_function(kernel, map, map.grad(level) / mass))
    }

    /// `ln f(x)` with the floor applied when the map does not keep `f` positive.
    fn log_primal(&self, z: f64, map: MirrorMap) -> f64 {
        match map {
            MirrorMap::Kl => z,
            MirrorMap::SquaredNorm => z.max(self.positivity_floor).ln(),
        }
    }

    fn integral(&self, z: &DualFunction) -> Result<f64> {
        let mut acc = 0.0;
        for u in self.grid.atoms() {
            // A signed estimate is scored as the intensity max(f, 0).
            acc += primal_checked(z, z.dual_unchecked(u))?.max(0.0);
        }
        Ok(self.cell_volume * acc)
    }
}

fn primal_checked(z: &DualFunction, dual: f64) -> Result<f64> {
    if z.map == MirrorMap::Kl && dual > DUAL_CLAMP {
        return Err(Error::Saturation(dual));
    }
    Ok(z.map.grad_conj_clamped(dual).0)
}

impl Objective for PoissonModel {
    type Sample = Vec<f64>;

    fn outputs(&self) -> usize {
        1
    }

    fn point<'a>(&self, sample: &'a Vec<f64>) -> &'a [f64] {
        sample
    }

    fn sample_coefficients(&self, _sample: &Vec<f64>, primal: &[f64], map: MirrorMap) -> Vec<f64> {
        let f = match map {
            MirrorMap::Kl => primal[0],
            MirrorMap::SquaredNorm => primal[0].max(self.positivity_floor),
        };
        vec![-1.0 / f]
    }

    fn grid_term(&self) -> Option<GridTerm> {
        Some(GridTerm {
            len: self.grid.len(),
            coefficient: self.cell_volume,
        })
    }
}

/// Per-sample loss `-ln f(x) + h sum_j f(u_j)`. Under KL this is
/// `-z(x) + h sum_j exp(z(u_j))`.
pub fn poisson_loss(z: &DualFunction, x: &[f64], model: &PoissonModel) -> Result<f64> {
    poisson_empirical_risk(z, std::slice::from_ref(&x.to_vec()), model)
}

/// Mean per-sample loss over `points`; the grid term is computed once.
pub fn poisson_empirical_risk(z: &DualFunction, points: &[Vec<f64>], model: &PoissonModel) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if z.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: z.dim(),
        });
    }
    let integral = model.integral(z)?;
    let mut data = 0.0;
    for x in points {
        let d = z.evaluate_dual(x)?;
        data -= model.log_primal(d, z.map);
    }
    Ok(data / points.len() as f64 + integral)
}

/// Functional pseudo-gradient of the per-sample loss at `x`:
/// `-(1 / f(x)) k(x, .) + h sum_j k(u_j, .)`.
pub fn poisson_pseudo_gradient_functional(z: &DualFunction, x: &[f64], model: &PoissonModel) -> Result<PseudoGradient> {
    let d = z.evaluate_dual(x)?;
    let f = primal_checked(z, d)?;
    let coeffs = model.sample_coefficients(&x.to_vec(), &[f], z.map);
    Ok(PseudoGradient {
        atoms: vec![(x.to_vec(), coeffs)],
        grid: model.grid_term(),
    })
}

/// Gradient of the per-sample loss with respect to the weights of `z` on its
/// own dictionary. Under KL: `-k_D(x) + h sum_j exp(z(u_j)) k_D(u_j)`.
pub fn poisson_pseudo_gradient_weights(z: &DualFunction, x: &[f64], model: &PoissonModel) -> Result<DVector<f64>> {
    let kx = kernel_vector(&z.kernel, &z.dict, x)?;
    let zx = z.weights.iter().zip(kx.iter()).map(|(w, k)| w * k).sum::<f64>();
    let mut g = match z.map {
        MirrorMap::Kl => -kx,
        MirrorMap::SquaredNorm => -kx / zx.max(model.positivity_floor),
    };
    for u in model.grid.atoms() {
        let ku = kernel_vector(&z.kernel, &z.dict, u)?;
        let zu = z.weights.iter().zip(ku.iter()).map(|(w, k)| w * k).sum::<f64>();
        let scale = match z.map {
            MirrorMap::Kl => primal_checked(z, zu)?,
            MirrorMap::SquaredNorm => 1.0,
        };
        g.axpy(model.cell_volume * scale, &ku, 1.0);
    }
    Ok(g)
}

/// Unbiased sample estimate of `<grad R(f), E[g]>`, the double integral
/// `int int v(x) k(x, y) v(y)` with `v = 1 - p / f` and `p` the sampling
/// density. The `1` part uses the model's grid, the `p / f` part the samples.
/// Needs at least two samples.
pub fn verify_pseudo_gradient_property(z: &DualFunction, model: &PoissonModel, samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let h = model.cell_volume;
    let k = &z.kernel;
    let grid: Vec<&[f64]> = model.grid.atoms().collect();
    let mut inv_f = Vec::with_capacity(n);
    for x in samples {
        let d = z.evaluate_dual(x)?;
        let f = match z.map {
            MirrorMap::Kl => primal_checked(z, d)?,
            MirrorMap::SquaredNorm => d.max(model.positivity_floor),
        };
        inv_f.push(1.0 / f);
    }
    let mut grid_grid = 0.0;
    for a in &grid {
        for b in &grid {
            grid_grid += k.eval_unchecked(a, b);
        }
    }
    grid_grid *= h * h;
    let mut cross = 0.0;
    for (x, w) in samples.iter().zip(&inv_f) {
        cross += w * grid.iter().map(|u| k.eval_unchecked(u, x)).sum::<f64>();
    }
    cross *= h / n as f64;
    let mut pairs = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pairs += 2.0 * inv_f[i] * inv_f[j] * k.eval_unchecked(&samples[i], &samples[j]);
        }
    }
    pairs /= (n * (n - 1)) as f64;
    Ok(grid_grid - 2.0 * cross + pairs)
}

/// Quadrature value of the same double integral given the sampling density,
/// using a midpoint rule with `nodes_per_dim` nodes per axis over the model box.
pub fn pseudo_gradient_alignment_quadrature(
    z: &DualFunction,
    model: &PoissonModel,
    density: impl Fn(&[f64]) -> f64,
    nodes_per_dim: usize,
) -> Result<f64> {
    let quad = PoissonModel::new(&GridSpec {
        bounds: model.bounds.clone(),
        points_per_dim: vec![nodes_per_dim; model.dim()],
    })?;
    let w = quad.cell_volume;
    let nodes: Vec<&[f64]> = quad.grid.atoms().collect();
    let mut v = Vec::with_capacity(nodes.len());
    for x in &nodes {
        let d = z.evaluate_dual(x)?;
        let f = match z.map {
            MirrorMap::Kl => primal_checked(z, d)?,
            MirrorMap::SquaredNorm => d.max(model.positivity_floor),
        };
        v.push(1.0 - density(x) / f);
    }
    let mut acc = 0.0;
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            acc += v[i] * v[j] * z.kernel.eval_unchecked(a, b);
        }
    }
    Ok(acc * w * w)
}

/// A feature vector with a class index in `0..classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Multiclass kernel logistic regression with softmax cross-entropy; one
/// output of the iterate per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlrModel {
    classes: usize,
}

impl KlrModel {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        Ok(KlrModel { classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn klr_scores(f: &Expansion, x: &[f64]) -> Result<Vec<f64>> {
    let duals = f.dual_at(x)?;
    Ok(duals.into_iter().map(|d| f.map.grad_conj_clamped(d).0).collect())
}

fn check_label(f: &Expansion, y: usize) -> Result<()> {
    if y >= f.outputs() {
        return Err(Error::InvalidArgument(format!("label {y} outside 0..{}", f.outputs())));
    }
    Ok(())
}

/// `ln sum_c exp(f_c(x)) - f_y(x)`.
pub fn klr_loss(f: &Expansion, x: &[f64], y: usize) -> Result<f64> {
    check_label(f, y)?;
    let s = klr_scores(f, x)?;
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - s[y])
}

/// Pseudo-gradient at `(x, y)`: one atom at `x` whose coefficients are the
/// softmax probabilities minus the one-hot label. They sum to zero.
pub fn klr_gradient(f: &Expansion, x: &[f64], y: usize) -> Result<PseudoGradient> {
    check_label(f, y)?;
    let s = klr_scores(f, x)?;
    let mut p = softmax(&s);
    p[y] -= 1.0;
    Ok(PseudoGradient {
        atoms: vec![(x.to_vec(), p)],
        grid: None,
    })
}

/// Index of the largest score.
pub fn klr_predict(f: &Expansion, x: &[f64]) -> Result<usize> {
    let s = klr_scores(f, x)?;
    Ok(s.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (c, &v)| if v > best.1 { (c, v) } else { best },
        )
        .0)
}

impl Objective for KlrModel {
    type Sample = LabeledPoint;

    fn outputs(&self) -> usize {
        self.classes
    }

    fn point<'a>(&self, sample: &'a LabeledPoint) -> &'a [f64] {
        &sample.x
    }

    fn sample_coefficients(&self, sample: &LabeledPoint, primal: &[f64], _map: MirrorMap) -> Vec<f64> {
        let mut p = softmax(primal);
        p[sample.label] -= 1.0;
        p
    }

    fn grid_term(&self) -> Option<GridTerm> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn unit_model(n: usize) -> PoissonModel {
        PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 1.0)],
            points_per_dim: vec![n],
        })
        .unwrap()
    }

    fn sample_fn(map: MirrorMap) -> DualFunction {
        let mut dict = unit_model(5).grid().clone();
        dict.push(&[0.37], false).unwrap();
        dict.push(&[0.81], false).unwrap();
        DualFunction::new(
            Kernel::gaussian(0.02).unwrap(),
            map,
            dict,
            vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.25],
        )
        .unwrap()
    }

    #[test]
    fn grid_layout() {
        let m = unit_model(4);
        let pts: Vec<f64> = m.grid().atoms().map(|a| a[0]).collect();
        assert_eq!(pts, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(m.cell_volume(), 0.25);
        assert_eq!(m.grid().num_fixed(), 4);

        let m2 = PoissonModel::new(&GridSpec {
            bounds: vec![(0.0, 2.0), (-1.0, 1.0)],
            points_per_dim: vec![2, 4],
        })
        .unwrap();
        assert_eq!(m2.grid().len(), 8);
        assert_eq!(m2.grid().atom(0), &[0.5, -0.75]);
        assert_eq!(m2.grid().atom(1), &[0.5, -0.25]);
        assert_eq!(m2.grid().atom(4), &[1.5, -0.75]);
        assert_relative_eq!(m2.cell_volume(), 0.5);

        for bad in [
            GridSpec {
                bounds: vec![(1.0, 0.0)],
                points_per_dim: vec![3],
            },
            GridSpec {
                bounds: vec![(0.0, 1.0)],
                points_per_dim: vec![0],
            },
            GridSpec {
                bounds: vec![(0.0, 1.0)],
                points_per_dim: vec![2, 2],
            },
        ] {
            assert!(matches!(PoissonModel::new(&bad), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn zero_function_loss_is_domain_volume() {
        let m = unit_model(10);
        let z = m.grid_function(Kernel::gaussian(0.01).unwrap(), MirrorMap::Kl, 0.0);
        assert_relative_eq!(poisson_loss(&z, &[0.3], &m).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let m = unit_model(5);
        let z = sample_fn(MirrorMap::Kl);
        let x = [0.42];
        let direct = -z.evaluate_dual(&x).unwrap()
            + 0.2 * m.grid().atoms().map(|u| z.evaluate_dual(u).unwrap().exp()).sum::<f64>();
        assert_relative_eq!(poisson_loss(&z, &x, &m).unwrap(), direct, epsilon = 1e-14);

        let batch = vec![vec![0.1], vec![0.5], vec![0.9]];
        let mean = batch.iter().map(|x| poisson_loss(&z, x, &m).unwrap()).sum::<f64>() / 3.0;
        assert_relative_eq!(poisson_empirical_risk(&z, &batch, &m).unwrap(), mean, epsilon = 1e-14);
    }

    #[test]
    fn squared_norm_loss_uses_floor_and_positive_part() {
        let m = unit_model(5);
        let mut z = sample_fn(MirrorMap::SquaredNorm);
        z.weights.iter_mut().for_each(|w| *w = -1.0);
        let l = poisson_loss(&z, &[0.5], &m).unwrap();
        assert_relative_eq!(l, -(DEFAULT_POSITIVITY_FLOOR.ln()), epsilon = 1e-14);

        // mixed signs: only the positive grid values enter the integral
        for (i, w) in z.weights.iter_mut().enumerate() {
            *w = if i % 2 == 0 { 2.0 } else { -3.0 };
        }
        let fx = z.evaluate_dual(&[0.5]).unwrap();
        let integral: f64 = 0.2
            * m.grid()
                .atoms()
                .map(|u| z.evaluate_dual(u).unwrap().max(0.0))
                .sum::<f64>();
        let l = poisson_loss(&z, &[0.5], &m).unwrap();
        assert_relative_eq!(l, -fx.max(DEFAULT_POSITIVITY_FLOOR).ln() + integral, epsilon = 1e-14);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let m = unit_model(5);
        for map in [MirrorMap::Kl, MirrorMap::SquaredNorm] {
            let mut z = sample_fn(map);
            if map == MirrorMap::SquaredNorm {
                z.weights.iter_mut().for_each(|w| *w = w.abs() + 1.0);
            }
            let x = [0.44];
            let g = poisson_pseudo_gradient_weights(&z, &x, &m).unwrap();
            for i in 0..z.weights.len() {
                let step = 1e-6;
                let mut up = z.clone();
                up.weights[i] += step;
                let mut dn = z.clone();
                dn.weights[i] -= step;
                let fd = (poisson_loss(&up, &x, &m).unwrap() - poisson_loss(&dn, &x, &m).unwrap()) / (2.0 * step);
                assert_relative_eq!(g[i], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn functional_gradient_terms() {
        // one sample atom with coefficient -1/f(x), grid coefficient h
        let m = unit_model(5);
        let z = sample_fn(MirrorMap::Kl);
        let x = [0.44];
        let g = poisson_pseudo_gradient_functional(&z, &x, &m).unwrap();
        let f = z.evaluate_primal(&x).unwrap();
        assert_eq!(g.atoms.len(), 1);
        assert_eq!(g.atoms[0].0, vec![0.44]);
        assert_relative_eq!(g.atoms[0].1[0], -1.0 / f, epsilon = 1e-15);
        assert_eq!(
            g.grid,
            Some(GridTerm {
                len: 5,
                coefficient: 0.2
            })
        );
    }

    #[test]
    fn alignment_vanishes_at_truth_and_is_positive_away() {
        // uniform density on [0, 1] and f = 1 everywhere: v = 0
        let m = unit_model(20);
        let k = Kernel::gaussian(0.01).unwrap();
        let z = DualFunction::zeros(k, MirrorMap::Kl, m.grid().clone());
        let q = pseudo_gradient_alignment_quadrature(&z, &m, |_| 1.0, 50).unwrap();
        assert!(q.abs() < 1e-12);
        let far = pseudo_gradient_alignment_quadrature(&z, &m, |x| 2.0 * x[0], 50).unwrap();
        assert!(far > 1e-4);
    }

    #[test]
    fn monte_carlo_alignment_tracks_quadrature() {
        use rand::{Rng, SeedableRng};
        let m = unit_model(50);
        let k = Kernel::gaussian(0.02).unwrap();
        let z = m.grid_function(k, MirrorMap::Kl, -0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // density 2x by inversion
        let samples: Vec<Vec<f64>> = (0..3000).map(|_| vec![rng.random::<f64>().sqrt()]).collect();
        let mc = verify_pseudo_gradient_property(&z, &m, &samples).unwrap();
        let q = pseudo_gradient_alignment_quadrature(&z, &m, |x| 2.0 * x[0], 200).unwrap();
        assert!(q > 0.0);
        assert_relative_eq!(mc, q, max_relative = 0.1);
        assert!(verify_pseudo_gradient_property(&z, &m, &samples[..1]).is_err());
    }

    fn klr_fn() -> Expansion {
        let dict = Dictionary::from_points(&[vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.0]], false).unwrap();
        let w = DMatrix::from_row_slice(3, 3, &[0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.9]);
        Expansion::new(Kernel::gaussian(0.5).unwrap(), MirrorMap::SquaredNorm, dict, w).unwrap()
    }

    #[test]
    fn klr_gradient_sums_to_zero_and_matches_fd() {
        let f = klr_fn();
        let x = [0.2, 0.3];
        for y in 0..3 {
            let g = klr_gradient(&f, &x, y).unwrap();
            let c = &g.atoms[0].1;
            assert!(c.iter().sum::<f64>().abs() < 1e-15);
            assert!(c[y] < 0.0);
            // d loss / d f_c(x) by finite differences on a constant shift of one output
            let kx = kernel_vector(&f.kernel, &f.dict, &x).unwrap();
            let norm2 = kx.dot(&kx);
            #[allow(clippy::needless_range_loop)]
            for cls in 0..3 {
                let step = 1e-6;
                let mut up = f.clone();
                let mut dn = f.clone();
                for n in 0..3 {
                    up.weights[(n, cls)] += step * kx[n] / norm2;
                    dn.weights[(n, cls)] -= step * kx[n] / norm2;
                }
                let fd = (klr_loss(&up, &x, y).unwrap() - klr_loss(&dn, &x, y).unwrap()) / (2.0 * step);
                assert_relative_eq!(c[cls], fd, epsilon = 1e-8);
            }
        }
        assert!(klr_gradient(&f, &x, 3).is_err());
    }

    #[test]
    fn klr_loss_of_equal_scores_is_log_classes() {
        let dict = Dictionary::from_points(&[vec![0.0]], false).unwrap();
        let f = Expansion::zeros(Kernel::gaussian(1.0).unwrap(), MirrorMap::SquaredNorm, dict, 4);
        assert_relative_eq!(klr_loss(&f, &[0.3], 2).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(KlrModel::new(1).is_err());
    }

    #[test]
    fn klr_prediction_is_argmax() {
        let f = klr_fn();
        let x = [1.0, 0.5];
        let s = f.dual_at(&x).unwrap();
        let best = (0..3).max_by(|a, b| s[*a].partial_cmp(&s[*b]).unwrap()).unwrap();
        assert_eq!(klr_predict(&f, &x).unwrap(), best);
    }

    proptest! {
        #[test]
        fn softmax_coefficients_sum_to_zero(scores in prop::collection::vec(-30.0f64..30.0, 2..8), pick in 0usize..8) {
            let y = pick % scores.len();
            let m = KlrModel::new(scores.len()).unwrap();
            let c = m.sample_coefficients(&LabeledPoint { x: vec![0.0], label: y }, &scores, MirrorMap::SquaredNorm);
            prop_assert!(c.iter().sum::<f64>().abs() < 1e-12);
            let signs_ok = c.iter().enumerate().all(|(i, v)| (i == y) == (*v <= 0.0) || *v == 0.0);
            prop_assert!(signs_ok);
        }

        #[test]
        fn kl_sample_coefficient_is_negative_reciprocal(z in -50.0f64..50.0) {
            let m = unit_model(3);
            let c = m.sample_coefficients(&vec![0.5], &[z.exp()], MirrorMap::Kl);
            prop_assert!((c[0] * z.exp() + 1.0).abs() < 1e-12);
        }
    }
}
