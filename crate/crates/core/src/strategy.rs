//! Decentralized feedback strategies and the follower closed loop.
//!
//! With `g = G - B L / R` and `S = B^2 / R`:
//!
//! ```text
//! u0 = -(B0 y0 + g y - Pi g psi) / R0
//! ui = -(B (P xi + K x + phi) + L u0) / R
//! ```
//!
//! Every function comes in two flavors: one taking a time `t`, where the
//! Riccati values are interpolated linearly, and one taking a node index `k`,
//! which reads the stored node values directly and is what the simulator uses.

use crate::config::ModelParams;
use crate::error::{Error, Result};
use crate::grid::Trajectory;
use crate::limit::Vec3;
use crate::riccati::FollowerRiccati;

/// Riccati values at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    pub p: f64,
    pub k: f64,
    pub pi: f64,
}

#[derive(Debug, Clone)]
pub struct Strategies {
    params: ModelParams,
    p: Trajectory<f64>,
    k: Trajectory<f64>,
    pi: Trajectory<f64>,
}

impl Strategies {
    pub fn new(params: &ModelParams, riccati: &FollowerRiccati) -> Self {
        Self {
            params: params.clone(),
            p: riccati.p.clone(),
            k: riccati.k.clone(),
            pi: riccati.pi.clone(),
        }
    }

    /// Strategies from explicit gain trajectories, which must share one grid.
    pub fn from_gains(
        params: &ModelParams,
        p: Trajectory<f64>,
        k: Trajectory<f64>,
        pi: Trajectory<f64>,
    ) -> Result<Self> {
        if p.grid() != k.grid() || p.grid() != pi.grid() {
            return Err(Error::InvalidArgument("gain trajectories must share one grid".into()));
        }
        Ok(Self {
            params: params.clone(),
            p,
            k,
            pi,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn gains(&self, t: f64) -> Gains {
        Gains {
            p: self.p.at(t),
            k: self.k.at(t),
            pi: self.pi.at(t),
        }
    }

    pub fn gains_at(&self, node: usize) -> Gains {
        Gains {
            p: *self.p.node(node),
            k: *self.k.node(node),
            pi: *self.pi.node(node),
        }
    }

    pub fn leader_control(&self, t: f64, ybar0: f64, ybar: f64, psibar: f64) -> f64 {
        leader_control_with(&self.params, self.gains(t), ybar0, ybar, psibar)
    }

    pub fn leader_control_at(&self, node: usize, ybar0: f64, ybar: f64, psibar: f64) -> f64 {
        leader_control_with(&self.params, self.gains_at(node), ybar0, ybar, psibar)
    }

    pub fn follower_control(&self, t: f64, x: f64, xbar: f64, phibar: f64, u0: f64) -> f64 {
        follower_control_with(&self.params, self.gains(t), x, xbar, phibar, u0)
    }

    pub fn follower_control_at(&self, node: usize, x: f64, xbar: f64, phibar: f64, u0: f64) -> f64 {
        follower_control_with(&self.params, self.gains_at(node), x, xbar, phibar, u0)
    }

    pub fn follower_drift(&self, t: f64, x: f64, xbar: f64, phibar: f64, x0: f64, u0: f64) -> f64 {
        follower_drift_with(&self.params, self.gains(t), x, xbar, phibar, x0, u0)
    }

    pub fn follower_drift_at(&self, node: usize, x: f64, xbar: f64, phibar: f64, x0: f64, u0: f64) -> f64 {
        follower_drift_with(&self.params, self.gains_at(node), x, xbar, phibar, x0, u0)
    }

    pub fn stationarity_residual_follower(&self, t: f64, x: f64, xbar: f64, phibar: f64, u: f64, u0: f64) -> f64 {
        follower_residual_with(&self.params, self.gains(t), x, xbar, phibar, u, u0)
    }

    pub fn stationarity_residual_follower_at(
        &self,
        node: usize,
        x: f64,
        xbar: f64,
        phibar: f64,
        u: f64,
        u0: f64,
    ) -> f64 {
        follower_residual_with(&self.params, self.gains_at(node), x, xbar, phibar, u, u0)
    }

    /// `y = [y0, ybar, psibar]`.
    pub fn stationarity_residual_leader(&self, t: f64, y: &Vec3, u0: f64) -> f64 {
        leader_residual_with(&self.params, self.pi.at(t), y, u0)
    }

    pub fn stationarity_residual_leader_at(&self, node: usize, y: &Vec3, u0: f64) -> f64 {
        leader_residual_with(&self.params, *self.pi.node(node), y, u0)
    }
}

fn leader_feedback(p: &ModelParams, pi: f64, ybar0: f64, ybar: f64, psibar: f64) -> f64 {
    let g = p.leader_coupling();
    p.B0 * ybar0 + g * ybar - pi * g * psibar
}

pub fn leader_control_with(p: &ModelParams, gains: Gains, ybar0: f64, ybar: f64, psibar: f64) -> f64 {
    -leader_feedback(p, gains.pi, ybar0, ybar, psibar) / p.R0
}

pub fn follower_control_with(p: &ModelParams, gains: Gains, x: f64, xbar: f64, phibar: f64, u0: f64) -> f64 {
    -(p.B * (gains.p * x + gains.k * xbar + phibar) + p.L * u0) / p.R
}

/// Closed-loop follower drift `(A - S P) x - S (K xbar + phibar) + F x0 + g u0 + f`.
pub fn follower_drift_with(
    p: &ModelParams,
    gains: Gains,
    x: f64,
    xbar: f64,
    phibar: f64,
    x0: f64,
    u0: f64,
) -> f64 {
    let s = p.control_gain();
    (p.A - s * gains.p) * x - s * (gains.k * xbar + phibar) + p.F * x0 + p.leader_coupling() * u0 + p.f
}

/// Open-loop follower drift `A x + B u + F x0 + G u0 + f`.
pub fn open_loop_drift(p: &ModelParams, x: f64, u: f64, x0: f64, u0: f64) -> f64 {
    p.A * x + p.B * u + p.F * x0 + p.G * u0 + p.f
}

pub fn follower_residual_with(
    p: &ModelParams,
    gains: Gains,
    x: f64,
    xbar: f64,
    phibar: f64,
    u: f64,
    u0: f64,
) -> f64 {
    p.B * (gains.p * x + gains.k * xbar + phibar) + p.R * u + p.L * u0
}

pub fn leader_residual_with(p: &ModelParams, pi: f64, y: &Vec3, u0: f64) -> f64 {
    p.R0 * u0 + leader_feedback(p, pi, y[0], y[1], y[2])
}
