//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spppot_core::{
    simulate_toy, BudgetPolicy, Dictionary, DualFunction, Expansion, GridSpec, Kernel, MirrorMap, PoissonModel,
    SpppotState,
};

pub const TOY_BANDWIDTH: f64 = 0.0065;

/// `n` removable atoms on `[0, 1]` with weights in `[-1, 1]`.
pub fn random_function(n: usize, seed: u64) -> DualFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
    let weights = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dict = Dictionary::from_points(&pts, false).expect("one-dimensional points");
    DualFunction::new(Kernel::gaussian(TOY_BANDWIDTH).unwrap(), MirrorMap::Kl, dict, weights).unwrap()
}

/// `count` standard-normal-ish vectors of length `dim` (uniform on `[-1, 1]`).
pub fn random_vectors(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Toy model with a 100-point grid, a warm SPPPOT state after `warm_steps`
/// minibatches of 30, and the remaining training points.
pub fn warm_toy_state(warm_steps: usize) -> (PoissonModel, SpppotState, Vec<Vec<f64>>) {
    let model = PoissonModel::new(&GridSpec {
        bounds: vec![(0.0, 1.0)],
        points_per_dim: vec![100],
    })
    .unwrap();
    let eta = 0.012;
    let z0 = model.grid_function(
        Kernel::gaussian(TOY_BANDWIDTH).unwrap(),
        MirrorMap::Kl,
        -eta * model.cell_volume(),
    );
    let mut st = SpppotState::new(Expansion::from_dual(&z0), eta, BudgetPolicy::constant(6.6e-6).unwrap()).unwrap();
    let data = simulate_toy(10211.0, 1).unwrap().points;
    let mut chunks = data.chunks_exact(30);
    for batch in chunks.by_ref().take(warm_steps) {
        spppot_core::spppot_step(&mut st, batch, &model).unwrap();
    }
    let rest = chunks.flatten().cloned().collect();
    (model, st, rest)
}
