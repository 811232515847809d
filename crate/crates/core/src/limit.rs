//! The decoupled limit system of the leader.
//!
//! With `X = [x0, y, phi]` and `Y = [y0, x, psi]` the limit Hamiltonian system
//! reads
//!
//! ```text
//! dX = (A1 X - B1 Y + C Z + f0) dt + Z dW0,   X(T) = [xi0, 0, 0]
//! dY = (A2 X - B2 Y + f) dt - C Y dW0,        Y(0) = [H0 x0(0), xi_bar, 0]
//! ```
//!
//! Once `X = Phi Y + Psi` is known, `Y` is simulated forward and `X`, `Z` are
//! recovered from it.

use nalgebra::{SMatrix, SVector};

use crate::config::ModelParams;
use crate::decoupling::LeaderDecoupling;
use crate::error::{Error, Result};
use crate::grid::{OdeState, TimeGrid};
use crate::riccati::BLOW_UP_LIMIT;

pub type Mat3 = SMatrix<f64, 3, 3>;
pub type Vec3 = SVector<f64, 3>;

/// Coefficients of the limit system at one value of `Pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatrices {
    pub a1: Mat3,
    pub b1: Mat3,
    pub a2: Mat3,
    pub b2: Mat3,
    pub c: Mat3,
    pub f0: Vec3,
    pub f: Vec3,
}

impl BlockMatrices {
    pub fn assemble(params: &ModelParams, pi: f64) -> Self {
        let p = params;
        let s = p.control_gain();
        let g = p.leader_coupling();
        let closed = -p.A + s * pi;
        let cross = -pi * p.F + p.Q * p.Gamma1;
        #[rustfmt::skip]
        let a1 = Mat3::new(
            p.A0, -p.B0 * g / p.R0, 0.0,
            p.Q0 * p.Gamma0, closed, 0.0,
            cross, pi * g * g / p.R0, closed,
        );
        #[rustfmt::skip]
        let b1 = Mat3::new(
            p.B0 * p.B0 / p.R0, 0.0, -p.B0 * pi * g / p.R0,
            0.0, p.Q0 * p.Gamma0 * p.Gamma0, 0.0,
            -p.B0 * pi * g / p.R0, 0.0, pi * pi * g * g / p.R0,
        );
        #[rustfmt::skip]
        let a2 = Mat3::new(
            -p.Q0, -p.F, 0.0,
            p.F, -g * g / p.R0, -s,
            0.0, s, 0.0,
        );
        #[rustfmt::skip]
        let b2 = Mat3::new(
            p.A0, -p.Q0 * p.Gamma0, cross,
            p.B0 * g / p.R0, closed, -pi * g * g / p.R0,
            0.0, 0.0, closed,
        );
        let mut c = Mat3::zeros();
        c[(0, 0)] = p.C0;
        Self {
            a1,
            b1,
            a2,
            b2,
            c,
            f0: Vec3::new(p.f0, -p.Q0 * p.Gamma0 * p.eta0, p.Q * p.eta - pi * p.f),
            f: Vec3::new(p.Q0 * p.eta0, p.f, 0.0),
        }
    }
}

/// Time-zero data closing the loop between `Y(0)` and `X(0) = Phi(0) Y(0) + Psi(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint0 {
    pub x0_init: f64,
    pub y0: Vec3,
    pub denominator: f64,
}

/// Solve `x0(0) = Phi11(0) H0 x0(0) + Phi12(0) xi_bar + Psi1(0)` for `x0(0)`.
pub fn resolve_fixed_point(
    phi0: &Mat3,
    psi0: &Vec3,
    params: &ModelParams,
    denominator_min: f64,
) -> Result<FixedPoint0> {
    let xi_bar = params.xi_bar();
    let denominator = 1.0 - params.H0 * phi0[(0, 0)];
    if !(denominator.abs() >= denominator_min) {
        return Err(Error::DegenerateFixedPoint {
            denominator: denominator.abs(),
        });
    }
    let numerator = phi0[(0, 1)] * xi_bar + psi0[0];
    let x0_init = if params.H0 == 0.0 {
        numerator
    } else {
        numerator / denominator
    };
    Ok(FixedPoint0 {
        x0_init,
        y0: Vec3::new(params.H0 * x0_init, xi_bar, 0.0),
        denominator,
    })
}

/// One path of the limit state, one entry per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPath {
    /// `[y0, x, psi]`
    pub y: Vec<Vec3>,
    /// `[x0, y, phi]`
    pub x: Vec<Vec3>,
    /// `[z0, 0, V]`
    pub z: Vec<Vec3>,
}

impl LimitPath {
    pub fn leader_state(&self, k: usize) -> f64 {
        self.x[k][0]
    }

    pub fn mean_field(&self, k: usize) -> f64 {
        self.y[k][1]
    }

    pub fn phi_bar(&self, k: usize) -> f64 {
        self.x[k][2]
    }
}

/// Everything needed to simulate limit paths: decoupling, node coefficients and
/// the time-zero fixed point.
#[derive(Debug, Clone)]
pub struct LimitSystem {
    grid: TimeGrid,
    blocks: Vec<BlockMatrices>,
    phi: Vec<Mat3>,
    psi: Vec<Vec3>,
    fixed_point: FixedPoint0,
}

impl LimitSystem {
    pub fn new(params: &ModelParams, decoupling: &LeaderDecoupling, denominator_min: f64) -> Result<Self> {
        let grid = *decoupling.phi.grid();
        let blocks = decoupling
            .pi
            .values()
            .iter()
            .map(|&pi| BlockMatrices::assemble(params, pi))
            .collect();
        let fixed_point = resolve_fixed_point(
            decoupling.phi.first(),
            decoupling.psi.first(),
            params,
            denominator_min,
        )?;
        Ok(Self {
            grid,
            blocks,
            phi: decoupling.phi.values().to_vec(),
            psi: decoupling.psi.values().to_vec(),
            fixed_point,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn fixed_point(&self) -> &FixedPoint0 {
        &self.fixed_point
    }

    pub fn blocks(&self, k: usize) -> &BlockMatrices {
        &self.blocks[k]
    }

    /// Euler-Maruyama on `Y` with `X = Phi Y + Psi` and `Z = -Phi C Y`.
    /// `dw0` holds the `M` common-noise increments.
    pub fn simulate_path(&self, dw0: &[f64]) -> Result<LimitPath> {
        let m = self.grid.steps();
        if dw0.len() != m {
            return Err(Error::InvalidArgument(format!(
                "expected {m} common-noise increments, got {}",
                dw0.len()
            )));
        }
        let h = self.grid.step();
        let mut y = Vec::with_capacity(m + 1);
        let mut x = Vec::with_capacity(m + 1);
        let mut z = Vec::with_capacity(m + 1);
        let mut yk = self.fixed_point.y0;
        for k in 0..=m {
            let blocks = &self.blocks[k];
            let xk = self.phi[k] * yk + self.psi[k];
            y.push(yk);
            x.push(xk);
            z.push(-(self.phi[k] * blocks.c * yk));
            if k == m {
                break;
            }
            let drift = blocks.a2 * xk - blocks.b2 * yk + blocks.f;
            yk = yk + drift * h - blocks.c * yk * dw0[k];
            let mag = yk.max_abs();
            if !(mag.is_finite() && mag <= BLOW_UP_LIMIT) {
                return Err(Error::BlowUp {
                    equation: "limit state",
                    node: k + 1,
                });
            }
        }
        Ok(LimitPath { y, x, z })
    }

    /// The noise-free recursion, which is also the recursion for `E[Y]`.
    pub fn mean_path(&self) -> Result<LimitPath> {
        self.simulate_path(&vec![0.0; self.grid.steps()])
    }
}
