#![allow(dead_code)]

use bfstack::config::{validate, ModelParams, Population, SimConfig};
use bfstack::noise::AgentStream;
use bfstack::simulate::DecentralizedSolution;

/// Uniform in `[low, high)` from a seeded stream.
pub fn draw(stream: &mut AgentStream, low: f64, high: f64) -> f64 {
    low + (high - low) * stream.uniform()
}

/// Follower coefficients drawn from a box inside the admissible region.
pub fn random_follower_params(stream: &mut AgentStream) -> ModelParams {
    let params = ModelParams {
        A: draw(stream, -1.0, 1.0),
        B: draw(stream, 0.2, 2.0),
        R: draw(stream, 0.2, 3.0),
        Q: draw(stream, 0.0, 2.0),
        H: draw(stream, 0.0, 2.0),
        Gamma: draw(stream, -1.0, 1.0),
        T: draw(stream, 0.5, 5.0),
        ..ModelParams::default()
    };
    assert!(validate(&params, Population::Limit).is_empty());
    params
}

pub fn reference_setup(steps: usize, paths: usize) -> (DecentralizedSolution, SimConfig) {
    setup(ModelParams::default(), steps, paths)
}

pub fn setup(params: ModelParams, steps: usize, paths: usize) -> (DecentralizedSolution, SimConfig) {
    let config = SimConfig {
        n_paths: paths,
        ..SimConfig::for_params(&params).unwrap().with_steps(steps).unwrap()
    };
    let sol = DecentralizedSolution::solve(&params, &config.grid, &config.tolerances).unwrap();
    (sol, config)
}
