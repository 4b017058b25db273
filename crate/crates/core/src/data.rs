//! Point-process simulation, CSV input/output and synthetic classification data.
//!
//! All randomness comes from a single seeded `ChaCha8Rng` per call, so equal
//! seeds give bitwise-equal streams on every platform.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LabeledPoint;

pub const TOY_MEAN: f64 = 0.5;
pub const TOY_SD: f64 = 0.1;

/// Normal(0.5, 0.1) density, the ground truth of the one-dimensional toy problem.
pub fn toy_ground_truth_density(x: f64) -> f64 {
    let z = (x - TOY_MEAN) / TOY_SD;
    (-0.5 * z * z).exp() / (TOY_SD * (2.0 * std::f64::consts::PI).sqrt())
}

/// Peak of [`toy_ground_truth_density`].
pub fn toy_density_max() -> f64 {
    toy_ground_truth_density(TOY_MEAN)
}

/// Where a stream came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Simulated { seed: u64 },
    Blobs { seed: u64 },
    File { path: String },
    Split { seed: u64 },
}

/// A finite point stream with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointStream {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub bounds: Vec<(f64, f64)>,
    pub origin: Origin,
}

impl PointStream {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Points paired with their labels; errors on an unlabeled stream.
    pub fn labeled_points(&self) -> Result<Vec<LabeledPoint>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Data {
            line: 0,
            message: "stream has no labels".into(),
        })?;
        Ok(self
            .points
            .iter()
            .zip(labels)
            .map(|(x, &label)| LabeledPoint { x: x.clone(), label })
            .collect())
    }

    /// Number of distinct classes, `max label + 1`.
    pub fn classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidArgument("no bounds given".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Inhomogeneous Poisson process on a box by thinning a homogeneous process of
/// rate `lambda_max`. A candidate where the intensity exceeds `lambda_max` is
/// an [`Error::EnvelopeViolation`].
pub fn sample_inhomogeneous_ppp(
    intensity: impl Fn(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    lambda_max: f64,
    seed: u64,
) -> Result<PointStream> {
    check_bounds(bounds)?;
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "envelope must be positive and finite, got {lambda_max}"
        )));
    }
    let volume: f64 = bounds.iter().map(|(a, b)| b - a).product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson =
        Poisson::new(lambda_max * volume).map_err(|e| Error::InvalidArgument(format!("candidate count: {e}")))?;
    let candidates = poisson.sample(&mut rng) as usize;
    let mut points = Vec::new();
    let mut x = vec![0.0; bounds.len()];
    for _ in 0..candidates {
        for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
            *xi = lo + (hi - lo) * rng.random::<f64>();
        }
        let value = intensity(&x);
        if value > lambda_max {
            return Err(Error::EnvelopeViolation { value, lambda_max });
        }
        if rng.random::<f64>() * lambda_max < value {
            points.push(x.clone());
        }
    }
    Ok(PointStream {
        points,
        labels: None,
        bounds: bounds.to_vec(),
        origin: Origin::Simulated { seed },
    })
}

/// Toy stream on `[0, 1]` with intensity `expected * density`, so about
/// `expected` points.
pub fn simulate_toy(expected: f64, seed: u64) -> Result<PointStream> {
    let peak = toy_density_max();
    sample_inhomogeneous_ppp(
        |x| expected * toy_ground_truth_density(x[0]),
        &[(0.0, 1.0)],
        expected * peak,
        seed,
    )
}

/// Options for [`load_points_csv`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsvOptions {
    /// Min-max scale every coordinate to `[0, 1]`.
    pub normalize: bool,
    /// The last column is an integer class label.
    pub labeled: bool,
}

fn data_err(line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        line,
        message: message.into(),
    }
}

/// Read points from CSV. A first row that does not parse as numbers is taken as
/// a header. Errors carry 1-based line numbers.
pub fn load_points_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<PointStream> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Option<f64>> = rec.iter().map(|f| f.parse::<f64>().ok()).collect();
        if i == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(data_err(line, format!("expected {w} fields, found {}", parsed.len())))
            }
            _ => {}
        }
        let mut values = Vec::with_capacity(parsed.len());
        for (col, v) in parsed.iter().enumerate() {
            match v {
                Some(v) if v.is_finite() => values.push(*v),
                _ => {
                    return Err(data_err(
                        line,
                        format!("field {} is not a finite number: `{}`", col + 1, &rec[col]),
                    ))
                }
            }
        }
        if opts.labeled {
            let label = values.pop().ok_or_else(|| data_err(line, "missing label column"))?;
            if label < 0.0 || label.fract() != 0.0 {
                return Err(data_err(
                    line,
                    format!("label must be a non-negative integer, got {label}"),
                ));
            }
            labels.push(label as usize);
        }
        if values.is_empty() {
            return Err(data_err(line, "row has no coordinates"));
        }
        points.push(values);
    }
    if points.is_empty() {
        return Err(data_err(0, "no data rows"));
    }
    let dim = points[0].len();
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
    for p in &points {
        for (b, v) in bounds.iter_mut().zip(p) {
            b.0 = b.0.min(*v);
            b.1 = b.1.max(*v);
        }
    }
    if opts.normalize {
        for (d, &(lo, hi)) in bounds.iter().enumerate() {
            if hi <= lo {
                return Err(data_err(
                    0,
                    format!("column {} is constant and cannot be normalized", d + 1),
                ));
            }
        }
        for p in &mut points {
            for (v, &(lo, hi)) in p.iter_mut().zip(&bounds) {
                *v = (*v - lo) / (hi - lo);
            }
        }
        bounds = vec![(0.0, 1.0); dim];
    }
    Ok(PointStream {
        points,
        labels: opts.labeled.then_some(labels),
        bounds,
        origin: Origin::File {
            path: path.display().to_string(),
        },
    })
}

/// Write a stream as headerless CSV, shortest round-trip float formatting,
/// labels in the last column.
pub fn write_points_csv(path: impl AsRef<Path>, stream: &PointStream) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for (i, p) in stream.points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &stream.labels {
            row.push(l[i].to_string());
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Gaussian blobs with unit variance per coordinate. Class centres sit on a
/// circle of radius `separation` in the first two coordinates (on a line when
/// `dim == 1`). Points are shuffled.
pub fn make_multiclass_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<PointStream> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "blobs need >= 2 classes, >= 1 point per class and dim >= 1".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut centre = vec![0.0; dim];
        if dim == 1 {
            centre[0] = separation * c as f64;
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            centre[0] = separation * angle.cos();
            centre[1] = separation * angle.sin();
        }
        for _ in 0..per_class {
            let p: Vec<f64> = centre.iter().map(|m| m + normal.sample(&mut rng)).collect();
            rows.push((p, c));
        }
    }
    rows.shuffle(&mut rng);
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
    for (p, _) in &rows {
        for (b, v) in bounds.iter_mut().zip(p) {
            b.0 = b.0.min(*v);
            b.1 = b.1.max(*v);
        }
    }
    let (points, labels) = rows.into_iter().unzip();
    Ok(PointStream {
        points,
        labels: Some(labels),
        bounds,
        origin: Origin::Blobs { seed },
    })
}

/// Seeded shuffle, then the first `round(test_fraction * n)` points form the test set.
pub fn train_test_split(stream: &PointStream, test_fraction: f64, seed: u64) -> Result<(PointStream, PointStream)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..stream.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * stream.len() as f64).round() as usize;
    let pick = |ids: &[usize]| PointStream {
        points: ids.iter().map(|&i| stream.points[i].clone()).collect(),
        labels: stream.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect()),
        bounds: stream.bounds.clone(),
        origin: Origin::Split { seed },
    };
    Ok((pick(&idx[n_test..]), pick(&idx[..n_test])))
}
