//! The five-agent benchmark: six-edge graph, scalar quadratic targets
//! `α = (−3, 5, 5, 1, −3)`, `γ_n = 0.1 / n^0.7`, unit Gaussian noise.

use crate::model::{NoiseModel, QuadraticObjective, StepSchedule, Topology};

pub const BENCHMARK_ADJACENCY: [[u8; 5]; 5] = [
    [0, 1, 0, 1, 0],
    [1, 0, 1, 0, 0],
    [0, 1, 0, 1, 1],
    [1, 0, 1, 0, 1],
    [0, 0, 1, 1, 0],
];

pub const BENCHMARK_ALPHAS: [f64; 5] = [-3.0, 5.0, 5.0, 1.0, -3.0];

pub const BENCHMARK_ITERATIONS: u64 = 30_000;

pub const BENCHMARK_BETA: f64 = 0.5;

pub fn benchmark_topology() -> Topology {
    let rows: Vec<Vec<u8>> = BENCHMARK_ADJACENCY.iter().map(|r| r.to_vec()).collect();
    Topology::from_adjacency(&rows).expect("benchmark graph is valid")
}

pub fn benchmark_objective() -> QuadraticObjective {
    QuadraticObjective::scalar(&BENCHMARK_ALPHAS).expect("benchmark targets are valid")
}

pub fn benchmark_schedule() -> StepSchedule {
    StepSchedule::new(0.1, 0.7).expect("benchmark schedule is valid")
}

pub fn benchmark_noise() -> NoiseModel {
    NoiseModel::gaussian(1.0).expect("unit noise")
}
