//! Uniform time discretization of `[0, T]` and values stored per node.
//!
//! Every solver and the Monte Carlo simulator share one [`TimeGrid`]. Off-node
//! evaluation of a [`Trajectory`] is piecewise linear; coefficient evaluation
//! inside the Runge-Kutta kernel uses [`HermiteScalar`] instead, because the
//! kernel's substages fall between nodes and need a fourth-order interpolant.

use std::ops::{Add, Mul};

use nalgebra::SMatrix;

use crate::error::{Error, Result};

/// Uniform grid `t_k = k * h`, `k = 0..=M`, with `t_M = T` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `M`; the grid has `M + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }

    /// Same horizon, twice the steps.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * 2,
        }
    }

    /// Index of the cell containing `t` and the fractional position inside it.
    /// Times outside `[0, T]` are clamped.
    pub(crate) fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.step()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        (k, x - k as f64)
    }

    /// Trapezoidal quadrature of node samples over `[0, T]`.
    pub fn trapezoid(&self, samples: &[f64]) -> f64 {
        debug_assert_eq!(samples.len(), self.nodes());
        let n = samples.len();
        let interior: f64 = samples[1..n - 1].iter().sum();
        self.step() * (interior + 0.5 * (samples[0] + samples[n - 1]))
    }
}

/// Values that the ODE kernel can integrate: a vector space over `f64` with a
/// magnitude used by the blow-up guard.
pub trait OdeState: Copy + Add<Output = Self> + Mul<f64, Output = Self> {
    /// Largest absolute component; NaN if any component is NaN.
    fn max_abs(&self) -> f64;
}

impl OdeState for f64 {
    fn max_abs(&self) -> f64 {
        self.abs()
    }
}

impl<const R: usize, const C: usize> OdeState for SMatrix<f64, R, C> {
    fn max_abs(&self) -> f64 {
        self.iter().fold(0.0_f64, |acc, x| {
            if x.is_nan() || acc.is_nan() {
                f64::NAN
            } else {
                acc.max(x.abs())
            }
        })
    }
}

/// One value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<V> {
    grid: TimeGrid,
    values: Vec<V>,
}

impl<V> Trajectory<V> {
    pub fn from_values(grid: TimeGrid, values: Vec<V>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs {} values, got {}",
                grid.nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn node(&self, k: usize) -> &V {
        &self.values[k]
    }

    pub fn first(&self) -> &V {
        &self.values[0]
    }

    pub fn last(&self) -> &V {
        &self.values[self.values.len() - 1]
    }

    pub fn map<W>(&self, f: impl FnMut(&V) -> W) -> Trajectory<W> {
        Trajectory {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<V: OdeState> Trajectory<V> {
    /// Piecewise-linear evaluation; exact at nodes.
    pub fn at(&self, t: f64) -> V {
        let (k, w) = self.grid.locate(t);
        if w == 0.0 {
            return self.values[k];
        }
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

impl Trajectory<f64> {
    pub fn sup_abs_diff(&self, other: &Trajectory<f64>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<const R: usize, const C: usize> Trajectory<SMatrix<f64, R, C>> {
    /// Entry-wise sup norm of the difference over all nodes.
    pub fn sup_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).max_abs())
            .fold(0.0, f64::max)
    }
}

/// Cubic Hermite interpolant of a trajectory whose time derivative is known at
/// every node.
#[derive(Debug, Clone)]
pub struct Hermite<V> {
    grid: TimeGrid,
    values: Vec<V>,
    slopes: Vec<V>,
}

pub type HermiteScalar = Hermite<f64>;

impl<V: OdeState> Hermite<V> {
    pub fn from_slopes(trajectory: &Trajectory<V>, slopes: Vec<V>) -> Result<Self> {
        if slopes.len() != trajectory.values().len() {
            return Err(Error::InvalidArgument(format!(
                "Hermite interpolant needs {} slopes, got {}",
                trajectory.values().len(),
                slopes.len()
            )));
        }
        Ok(Self {
            grid: *trajectory.grid(),
            values: trajectory.values().to_vec(),
            slopes,
        })
    }

    pub fn at(&self, t: f64) -> V {
        let (k, s) = self.grid.locate(t);
        if s == 0.0 {
            return self.values[k];
        }
        let h = self.grid.step();
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        self.values[k] * h00
            + self.slopes[k] * (h10 * h)
            + self.values[k + 1] * h01
            + self.slopes[k + 1] * (h11 * h)
    }
}

impl Hermite<f64> {
    /// Interpolant of the solution of an autonomous scalar ODE `y' = slope(y)`.
    pub fn new(trajectory: &Trajectory<f64>, slope: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: *trajectory.grid(),
            values: trajectory.values().to_vec(),
            slopes: trajectory.values().iter().map(|&v| slope(v)).collect(),
        }
    }
}
