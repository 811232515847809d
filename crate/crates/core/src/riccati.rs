//! Fixed-step backward integration and the scalar follower Riccati equations.
//!
//! All equations are written as `dy/dt = rhs(t, y)` with a terminal value at
//! `T`, and integrated from `t_M` down to `t_0` with the classical fourth-order
//! Runge-Kutta scheme on the shared grid.
//!
//! For a population of size `N` (or the limit, where `1 - Gamma/N` becomes 1)
//! with `c = 1 - Gamma/N` and `S = B^2/R`:
//!
//! ```text
//! P'  = -2A P  + S P^2           - c Q              P(T)  = H
//! K'  = -2A K  + S P K + S K (P + K) + c Q Gamma    K(T)  = 0
//! Pi' = -2A Pi + S Pi^2          - c Q (1 - Gamma)  Pi(T) = H
//! ```
//!
//! `Pi = P + K` holds identically; integrating it on its own gives an
//! independent check of the pair.

use crate::config::{ModelParams, Population};
use crate::error::{Error, Result};
use crate::grid::{HermiteScalar, OdeState, TimeGrid, Trajectory};

/// Any intermediate magnitude above this aborts the integration.
pub const BLOW_UP_LIMIT: f64 = 1e100;

/// Integrate `dy/dt = rhs(t, y)` backward from `y(T) = terminal`.
///
/// The value at the last node is `terminal` bit for bit.
pub fn integrate_backward<V: OdeState>(
    equation: &'static str,
    grid: &TimeGrid,
    terminal: V,
    mut rhs: impl FnMut(f64, &V) -> V,
) -> Result<Trajectory<V>> {
    let m = grid.steps();
    let h = grid.step();
    let guard = |v: &V, node: usize| {
        let mag = v.max_abs();
        if mag.is_finite() && mag <= BLOW_UP_LIMIT {
            Ok(())
        } else {
            Err(Error::BlowUp { equation, node })
        }
    };
    guard(&terminal, m)?;

    let mut values = vec![terminal; m + 1];
    let mut y = terminal;
    for k in (0..m).rev() {
        let t = grid.time(k + 1);
        let t_mid = t - 0.5 * h;
        let t_next = grid.time(k);
        let k1 = rhs(t, &y);
        let k2 = rhs(t_mid, &(y + k1 * (-0.5 * h)));
        let k3 = rhs(t_mid, &(y + k2 * (-0.5 * h)));
        let k4 = rhs(t_next, &(y + k3 * (-h)));
        y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (-h / 6.0);
        guard(&y, k)?;
        values[k] = y;
    }
    Trajectory::from_values(*grid, values)
}

/// Right-hand sides of the three scalar follower equations for one population size.
#[derive(Debug, Clone, Copy)]
pub struct FollowerEquations {
    a: f64,
    s: f64,
    q: f64,
    gamma: f64,
    coupling: f64,
}

impl FollowerEquations {
    pub fn new(params: &ModelParams, population: Population) -> Self {
        Self {
            a: params.A,
            s: params.control_gain(),
            q: params.Q,
            gamma: params.Gamma,
            coupling: population.coupling_factor(params.Gamma),
        }
    }

    pub fn p_rate(&self, p: f64) -> f64 {
        -2.0 * self.a * p + self.s * p * p - self.coupling * self.q
    }

    pub fn k_rate(&self, p: f64, k: f64) -> f64 {
        -2.0 * self.a * k + self.s * p * k + self.s * k * (p + k) + self.coupling * self.q * self.gamma
    }

    pub fn pi_rate(&self, pi: f64) -> f64 {
        -2.0 * self.a * pi + self.s * pi * pi - self.coupling * self.q * (1.0 - self.gamma)
    }
}

pub fn solve_p(params: &ModelParams, grid: &TimeGrid, population: Population) -> Result<Trajectory<f64>> {
    let eq = FollowerEquations::new(params, population);
    integrate_backward("P Riccati equation", grid, params.H, |_, &p| eq.p_rate(p))
}

/// `P` is evaluated at the Runge-Kutta substages by cubic Hermite
/// interpolation with slopes from its own equation.
pub fn solve_k(
    params: &ModelParams,
    p: &Trajectory<f64>,
    grid: &TimeGrid,
    population: Population,
) -> Result<Trajectory<f64>> {
    if p.grid() != grid {
        return Err(Error::InvalidArgument("P is stored on a different grid".into()));
    }
    let eq = FollowerEquations::new(params, population);
    let p_interp = HermiteScalar::new(p, |v| eq.p_rate(v));
    integrate_backward("K equation", grid, 0.0, |t, &k| eq.k_rate(p_interp.at(t), k))
}

pub fn solve_pi(params: &ModelParams, grid: &TimeGrid, population: Population) -> Result<Trajectory<f64>> {
    let eq = FollowerEquations::new(params, population);
    integrate_backward("Pi Riccati equation", grid, params.H, |_, &pi| eq.pi_rate(pi))
}

/// The follower triple `(P, K, Pi)` on one grid for one population size.
#[derive(Debug, Clone)]
pub struct FollowerRiccati {
    pub p: Trajectory<f64>,
    pub k: Trajectory<f64>,
    pub pi: Trajectory<f64>,
    pub population: Population,
}

impl FollowerRiccati {
    pub fn solve(params: &ModelParams, grid: &TimeGrid, population: Population) -> Result<Self> {
        let p = solve_p(params, grid, population)?;
        let k = solve_k(params, &p, grid, population)?;
        let pi = solve_pi(params, grid, population)?;
        Ok(Self { p, k, pi, population })
    }

    /// `sup_k |Pi_k - (P_k + K_k)|`.
    pub fn identity_defect(&self) -> f64 {
        self.p
            .values()
            .iter()
            .zip(self.k.values())
            .zip(self.pi.values())
            .map(|((p, k), pi)| (pi - (p + k)).abs())
            .fold(0.0, f64::max)
    }

    /// `Pi` as a Hermite interpolant, for coefficient evaluation between nodes.
    pub fn pi_interpolant(&self, params: &ModelParams) -> HermiteScalar {
        let eq = FollowerEquations::new(params, self.population);
        HermiteScalar::new(&self.pi, |v| eq.pi_rate(v))
    }
}

/// `sup |P_N - P| + sup |K_N - K|` between the finite-N and limit solutions.
pub fn riccati_convergence_gap(params: &ModelParams, grid: &TimeGrid, n: usize) -> Result<f64> {
    let finite = FollowerRiccati::solve(params, grid, Population::Finite(n))?;
    let limit = FollowerRiccati::solve(params, grid, Population::Limit)?;
    Ok(finite.p.sup_abs_diff(&limit.p) + finite.k.sup_abs_diff(&limit.k))
}
