//! Fixtures shared by the benchmarks.

use slkd_core::data::gaussian_mixture;
use slkd_core::{Model, ModelSpec, TaskData};

/// The reference task at a size that keeps one benchmark iteration short.
pub fn task(n_per_class: usize) -> TaskData {
    gaussian_mixture(10, 16, n_per_class, 0.9, 0).expect("valid task")
}

pub fn mlp(hidden: &[usize], seed: u64) -> Model {
    Model::init(ModelSpec::new(16, hidden.to_vec(), 10).expect("valid spec"), seed).expect("init")
}
