//! Reproducible noise for Monte Carlo paths.
//!
//! Each `(path, agent)` pair owns a ChaCha8 stream keyed by the run seed and
//! selected by `(path << 32) | agent`, where agent 0 is the leader's common
//! noise and agents `1..=N` are the followers. A stream first yields the
//! agent's initial (or terminal) value and then its `M` Brownian increments,
//! so any single number is a function of `(seed, path, agent, step)` alone.
//! Uniforms live in the open interval `(0, 1)`; normals come from the inverse
//! normal CDF, `z = -sqrt(2) erfc^{-1}(2u)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use statrs::function::erf::erfc_inv;

use crate::config::ModelParams;
use crate::grid::TimeGrid;

/// Uniform in `(0, 1)` from the top 52 bits of a 64-bit word; every value is
/// an odd multiple of `2^-53`, so neither endpoint is reachable.
pub fn open_unit(word: u64) -> f64 {
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

pub fn inverse_normal_cdf(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Stream of one agent on one path.
#[derive(Debug, Clone)]
pub struct AgentStream {
    rng: ChaCha8Rng,
}

impl AgentStream {
    pub fn new(seed: u64, path: u32, agent: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((u64::from(path) << 32) | u64::from(agent));
        Self { rng }
    }

    pub fn uniform(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }

    pub fn normal(&mut self) -> f64 {
        inverse_normal_cdf(self.uniform())
    }
}

/// Everything random on one Monte Carlo path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub path: u32,
    /// Common-noise increments, variance `h`.
    pub w0: Vec<f64>,
    /// Follower increments, `N` rows of `M`, row-major.
    pub w: Vec<f64>,
    /// Follower initial states.
    pub xi: Vec<f64>,
    /// Leader terminal value.
    pub xi0: f64,
    steps: usize,
}

impl NoiseBundle {
    pub fn population(&self) -> usize {
        self.xi.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Increments of follower `i` (zero-based).
    pub fn follower(&self, i: usize) -> &[f64] {
        &self.w[i * self.steps..(i + 1) * self.steps]
    }

    /// Reorder followers: new follower `i` is old follower `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.xi = order.iter().map(|&j| self.xi[j]).collect();
        out.w = order.iter().flat_map(|&j| self.follower(j).iter().copied()).collect();
        out
    }
}

fn increments(stream: &mut AgentStream, steps: usize, scale: f64, out: &mut Vec<f64>) {
    out.extend((0..steps).map(|_| scale * stream.normal()));
}

pub fn draw_noise(params: &ModelParams, grid: &TimeGrid, seed: u64, population: usize, path: u32) -> NoiseBundle {
    let steps = grid.steps();
    let scale = grid.step().sqrt();

    let mut leader = AgentStream::new(seed, path, 0);
    let xi0 = params.xi0_spec.sample(leader.normal());
    let mut w0 = Vec::with_capacity(steps);
    increments(&mut leader, steps, scale, &mut w0);

    let mut xi = Vec::with_capacity(population);
    let mut w = Vec::with_capacity(population * steps);
    for agent in 1..=population {
        let mut stream = AgentStream::new(seed, path, agent as u32);
        let u = stream.uniform();
        xi.push(params.xi_dist.sample(u, inverse_normal_cdf(u)));
        increments(&mut stream, steps, scale, &mut w);
    }
    NoiseBundle {
        seed,
        path,
        w0,
        w,
        xi,
        xi0,
        steps,
    }
}

/// Independent seed for one population size of a sweep (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, population: usize) -> u64 {
    let mut z = seed ^ (population as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
