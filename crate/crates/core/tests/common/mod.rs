#![allow(dead_code)]

use progtta::data::TrajectoryRecord;
use progtta::model::{Dims, MetaParams};
use progtta::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random parameters with a non-trivial `theta0`, so adaptation moves predictions.
pub fn random_meta(seed: u64, encoder: usize, adapt: usize, hidden: usize) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(encoder, adapt, hidden).unwrap();
    let m = MetaParams::init(dims, &mut rng);
    m.map(|t| Matrix::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-0.5..0.5)))
}

pub fn random_record(seed: u64, id: &str, len: usize, dim: usize) -> TrajectoryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let visual: Vec<f32> = (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrajectoryRecord::new(
        id,
        "task",
        "test",
        goal,
        visual,
        Some(TrajectoryRecord::progress_labels(len)),
    )
    .unwrap()
}
