//! The leader's decoupling field `X = Phi Y + Psi`.
//!
//! `Phi` is obtained from the linear flow
//!
//! ```text
//! d/dt [alpha; beta] = [[A1, -B1], [A2, -B2]] [alpha; beta],   (alpha, beta)(T) = (0, I)
//! ```
//!
//! as `Phi = alpha beta^{-1}`, and independently by integrating the
//! nonsymmetric Riccati equation
//!
//! ```text
//! Phi' = Phi B2 - Phi A2 Phi + A1 Phi - B1 - C Phi C,   Phi(T) = 0.
//! ```
//!
//! The `C Phi C` term has no counterpart in the linear flow, so the two only
//! agree when `C0 = 0`. [`CouplingTerm`] selects how the term enters the direct
//! solver and the residual so the discrepancy can be measured.

use nalgebra::SMatrix;

use crate::config::{ModelParams, Population, Tolerances};
use crate::error::{Error, Result};
use crate::grid::{Hermite, HermiteScalar, TimeGrid, Trajectory};
use crate::limit::{BlockMatrices, Mat3, Vec3};
use crate::riccati::{integrate_backward, FollowerEquations, FollowerRiccati};

type Flow = SMatrix<f64, 6, 3>;

/// How the `C Phi C` term enters the Riccati equation for `Phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CouplingTerm {
    /// `Phi' = ... - C Phi C`, as the equation is usually stated.
    Included,
    /// `Phi' = ... + C Phi C`.
    Negated,
    /// No coupling term; the equation the linear flow solves.
    Omitted,
}

impl CouplingTerm {
    pub const ALL: [CouplingTerm; 3] = [CouplingTerm::Included, CouplingTerm::Negated, CouplingTerm::Omitted];

    fn sign(self) -> f64 {
        match self {
            CouplingTerm::Included => 1.0,
            CouplingTerm::Negated => -1.0,
            CouplingTerm::Omitted => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CouplingTerm::Included => "included",
            CouplingTerm::Negated => "negated",
            CouplingTerm::Omitted => "omitted",
        }
    }
}

/// Right-hand side of the `Phi` equation.
pub fn phi_rate(blocks: &BlockMatrices, phi: &Mat3, term: CouplingTerm) -> Mat3 {
    phi * blocks.b2 - phi * blocks.a2 * phi + blocks.a1 * phi - blocks.b1
        - blocks.c * phi * blocks.c * term.sign()
}

fn pi_interpolant(params: &ModelParams, pi: &Trajectory<f64>) -> HermiteScalar {
    let eq = FollowerEquations::new(params, Population::Limit);
    HermiteScalar::new(pi, |v| eq.pi_rate(v))
}

/// Output of the `(alpha, beta)` flow.
#[derive(Debug, Clone)]
pub struct PhiFlow {
    pub alpha: Trajectory<Mat3>,
    pub beta: Trajectory<Mat3>,
    pub phi: Trajectory<Mat3>,
    pub beta_cond: Trajectory<f64>,
}

/// Ratio of the extreme singular values; infinite for a singular matrix.
pub fn condition_number(m: &Mat3) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

pub fn solve_phi_flow(
    params: &ModelParams,
    pi: &Trajectory<f64>,
    grid: &TimeGrid,
    beta_condition_max: f64,
) -> Result<PhiFlow> {
    if pi.grid() != grid {
        return Err(Error::InvalidArgument("Pi is stored on a different grid".into()));
    }
    let pi_at = pi_interpolant(params, pi);
    let mut terminal = Flow::zeros();
    terminal.fixed_view_mut::<3, 3>(3, 0).copy_from(&Mat3::identity());
    let flow = integrate_backward("alpha-beta flow", grid, terminal, |t, state| {
        let b = BlockMatrices::assemble(params, pi_at.at(t));
        let alpha = state.fixed_view::<3, 3>(0, 0);
        let beta = state.fixed_view::<3, 3>(3, 0);
        let mut rate = Flow::zeros();
        rate.fixed_view_mut::<3, 3>(0, 0).copy_from(&(b.a1 * alpha - b.b1 * beta));
        rate.fixed_view_mut::<3, 3>(3, 0).copy_from(&(b.a2 * alpha - b.b2 * beta));
        rate
    })?;

    let m = grid.steps();
    let mut alpha = Vec::with_capacity(m + 1);
    let mut beta = Vec::with_capacity(m + 1);
    let mut phi = Vec::with_capacity(m + 1);
    let mut cond = Vec::with_capacity(m + 1);
    for (node, state) in flow.values().iter().enumerate() {
        let a: Mat3 = state.fixed_view::<3, 3>(0, 0).into_owned();
        let b: Mat3 = state.fixed_view::<3, 3>(3, 0).into_owned();
        let c = condition_number(&b);
        if !(c <= beta_condition_max) {
            return Err(Error::BetaSingular { node, condition: c });
        }
        // Phi beta = alpha  <=>  beta^T Phi^T = alpha^T
        let phi_t = b
            .transpose()
            .lu()
            .solve(&a.transpose())
            .ok_or(Error::BetaSingular { node, condition: c })?;
        let p = if node == m { Mat3::zeros() } else { phi_t.transpose() };
        alpha.push(a);
        beta.push(b);
        phi.push(p);
        cond.push(c);
    }
    Ok(PhiFlow {
        alpha: Trajectory::from_values(*grid, alpha)?,
        beta: Trajectory::from_values(*grid, beta)?,
        phi: Trajectory::from_values(*grid, phi)?,
        beta_cond: Trajectory::from_values(*grid, cond)?,
    })
}

/// Direct backward integration of the `Phi` equation from `Phi(T) = 0`.
pub fn solve_phi_direct(
    params: &ModelParams,
    pi: &Trajectory<f64>,
    grid: &TimeGrid,
    term: CouplingTerm,
) -> Result<Trajectory<Mat3>> {
    if pi.grid() != grid {
        return Err(Error::InvalidArgument("Pi is stored on a different grid".into()));
    }
    let pi_at = pi_interpolant(params, pi);
    integrate_backward("Phi Riccati equation", grid, Mat3::zeros(), |t, phi| {
        phi_rate(&BlockMatrices::assemble(params, pi_at.at(t)), phi, term)
    })
}

/// Sup-norm defect of a node-wise `Phi` in the `Phi` equation, with the time
/// derivative taken by the fourth-order five-point central difference on the
/// interior nodes `2..=M-2`.
pub fn phi_residual(params: &ModelParams, pi: &Trajectory<f64>, phi: &Trajectory<Mat3>, term: CouplingTerm) -> f64 {
    let m = phi.grid().steps();
    if m < 4 {
        return f64::NAN;
    }
    let h = phi.grid().step();
    let v = phi.values();
    (2..=m - 2)
        .map(|k| {
            let derivative = (v[k - 2] - v[k - 1] * 8.0 + v[k + 1] * 8.0 - v[k + 2]) / (12.0 * h);
            let blocks = BlockMatrices::assemble(params, *pi.node(k));
            (derivative - phi_rate(&blocks, &v[k], term)).amax()
        })
        .fold(0.0, f64::max)
}

/// Backward solution of `Psi' = A1 Psi + f0 - Phi A2 Psi - Phi f`,
/// `Psi(T) = [xi0_mean, 0, 0]`.
pub fn solve_psi(
    params: &ModelParams,
    pi: &Trajectory<f64>,
    phi: &Trajectory<Mat3>,
    grid: &TimeGrid,
    xi0_mean: f64,
) -> Result<Trajectory<Vec3>> {
    if pi.grid() != grid || phi.grid() != grid {
        return Err(Error::InvalidArgument("Pi and Phi must share the grid".into()));
    }
    let pi_at = pi_interpolant(params, pi);
    // Phi between nodes: Hermite with slopes from the equation the flow solves.
    let slopes = phi
        .values()
        .iter()
        .zip(pi.values())
        .map(|(p, &pi)| phi_rate(&BlockMatrices::assemble(params, pi), p, CouplingTerm::Omitted))
        .collect();
    let phi_at = Hermite::from_slopes(phi, slopes)?;
    let terminal = Vec3::new(xi0_mean, 0.0, 0.0);
    integrate_backward("Psi equation", grid, terminal, |t, psi| {
        let b = BlockMatrices::assemble(params, pi_at.at(t));
        let phi = phi_at.at(t);
        b.a1 * psi + b.f0 - phi * b.a2 * psi - phi * b.f
    })
}

/// The complete leader decoupling on one grid.
#[derive(Debug, Clone)]
pub struct LeaderDecoupling {
    /// Limit `Pi`, the only time-varying input of the block matrices.
    pub pi: Trajectory<f64>,
    pub alpha: Trajectory<Mat3>,
    pub beta: Trajectory<Mat3>,
    pub phi: Trajectory<Mat3>,
    pub psi: Trajectory<Vec3>,
    pub beta_cond: Trajectory<f64>,
    /// Residual of the flow `Phi` in the `Phi` equation with the coupling term included.
    pub residual_sup: f64,
    /// `Psi` is integrated from the mean of the leader's terminal value.
    pub xi0_mean: f64,
}

impl LeaderDecoupling {
    pub fn solve(params: &ModelParams, limit: &FollowerRiccati, tolerances: &Tolerances) -> Result<Self> {
        if limit.population != Population::Limit {
            return Err(Error::InvalidArgument(
                "the leader decoupling needs the limit Riccati solution".into(),
            ));
        }
        let grid = *limit.pi.grid();
        let flow = solve_phi_flow(params, &limit.pi, &grid, tolerances.beta_condition_max)?;
        let xi0_mean = params.xi0_spec.mean();
        let psi = solve_psi(params, &limit.pi, &flow.phi, &grid, xi0_mean)?;
        let residual_sup = phi_residual(params, &limit.pi, &flow.phi, CouplingTerm::Included);
        Ok(Self {
            pi: limit.pi.clone(),
            alpha: flow.alpha,
            beta: flow.beta,
            phi: flow.phi,
            psi,
            beta_cond: flow.beta_cond,
            residual_sup,
            xi0_mean,
        })
    }

    pub fn residual(&self, params: &ModelParams, term: CouplingTerm) -> f64 {
        phi_residual(params, &self.pi, &self.phi, term)
    }

    pub fn max_beta_condition(&self) -> f64 {
        self.beta_cond.values().iter().copied().fold(0.0, f64::max)
    }

    /// `sup_t |Phi - Phi^T|`, informational only.
    pub fn asymmetry(&self) -> f64 {
        self.phi
            .values()
            .iter()
            .map(|p| (p - p.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialDist, TerminalSpec};

    fn reference(m: usize) -> (ModelParams, FollowerRiccati) {
        let params = ModelParams::default();
        let grid = TimeGrid::new(params.T, m).unwrap();
        let sol = FollowerRiccati::solve(&params, &grid, Population::Limit).unwrap();
        (params, sol)
    }

    fn zero_phi_params() -> ModelParams {
        ModelParams {
            B0: 0.0,
            Gamma0: 0.0,
            B: 1.0,
            R: 1.0,
            L: 1.0,
            G: 1.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn flow_terminal_data_are_exact() {
        let (params, sol) = reference(400);
        let flow = solve_phi_flow(&params, &sol.pi, sol.pi.grid(), 1e12).unwrap();
        assert_eq!(*flow.alpha.last(), Mat3::zeros());
        assert_eq!(*flow.beta.last(), Mat3::identity());
        assert_eq!(*flow.phi.last(), Mat3::zeros());
        assert_eq!(*flow.beta_cond.last(), 1.0);
    }

    #[test]
    fn vanishing_b1_gives_zero_phi() {
        let params = zero_phi_params();
        let grid = TimeGrid::new(params.T, 400).unwrap();
        let sol = FollowerRiccati::solve(&params, &grid, Population::Limit).unwrap();
        let flow = solve_phi_flow(&params, &sol.pi, &grid, 1e12).unwrap();
        assert!(flow.alpha.values().iter().all(|a| *a == Mat3::zeros()));
        assert!(flow.phi.values().iter().all(|p| p.amax() == 0.0));
        for term in CouplingTerm::ALL {
            let direct = solve_phi_direct(&params, &sol.pi, &grid, term).unwrap();
            assert!(direct.values().iter().all(|p| p.amax() == 0.0));
        }
    }

    #[test]
    fn flow_solves_the_equation_without_coupling_term() {
        let (params, sol) = reference(2000);
        let grid = *sol.pi.grid();
        let flow = solve_phi_flow(&params, &sol.pi, &grid, 1e12).unwrap();
        let direct = solve_phi_direct(&params, &sol.pi, &grid, CouplingTerm::Omitted).unwrap();
        assert!(flow.phi.sup_abs_diff(&direct) < 1e-9);
        assert!(phi_residual(&params, &sol.pi, &flow.phi, CouplingTerm::Omitted) < 1e-6);
    }

    #[test]
    fn methods_agree_for_all_terms_when_c0_vanishes() {
        let params = ModelParams {
            C0: 0.0,
            ..ModelParams::default()
        };
        let grid = TimeGrid::new(params.T, 1000).unwrap();
        let sol = FollowerRiccati::solve(&params, &grid, Population::Limit).unwrap();
        let flow = solve_phi_flow(&params, &sol.pi, &grid, 1e12).unwrap();
        for term in CouplingTerm::ALL {
            let direct = solve_phi_direct(&params, &sol.pi, &grid, term).unwrap();
            assert!(flow.phi.sup_abs_diff(&direct) < 1e-9, "{}", term.label());
        }
    }

    #[test]
    fn direct_solution_self_converges() {
        let (params, sol) = reference(1000);
        let coarse = *sol.pi.grid();
        let fine = coarse.refined();
        let sol_fine = FollowerRiccati::solve(&params, &fine, Population::Limit).unwrap();
        for term in CouplingTerm::ALL {
            let a = solve_phi_direct(&params, &sol.pi, &coarse, term).unwrap();
            let b = solve_phi_direct(&params, &sol_fine.pi, &fine, term).unwrap();
            assert!((a.first() - b.first()).amax() <= 1e-7, "{}", term.label());
        }
    }

    #[test]
    fn singular_beta_is_reported() {
        let (params, sol) = reference(200);
        let err = solve_phi_flow(&params, &sol.pi, sol.pi.grid(), 1.0 + 1e-12).unwrap_err();
        match err {
            Error::BetaSingular { node, condition } => {
                assert!(node < 200);
                assert!(condition > 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn psi_vanishes_for_homogeneous_data() {
        let params = ModelParams {
            f0: 0.0,
            f: 0.0,
            eta: 0.0,
            eta0: 0.0,
            xi0_spec: TerminalSpec::Deterministic(0.0),
            ..ModelParams::default()
        };
        let grid = TimeGrid::new(params.T, 500).unwrap();
        let sol = FollowerRiccati::solve(&params, &grid, Population::Limit).unwrap();
        let dec = LeaderDecoupling::solve(&params, &sol, &Tolerances::default()).unwrap();
        assert!(dec.psi.values().iter().all(|p| p.amax() == 0.0));
    }

    #[test]
    fn psi_terminal_is_leader_mean() {
        let (params, sol) = reference(500);
        let dec = LeaderDecoupling::solve(&params, &sol, &Tolerances::default()).unwrap();
        assert_eq!(dec.xi0_mean, 0.0);
        assert_eq!(*dec.psi.last(), Vec3::zeros());

        let shifted = ModelParams {
            xi0_spec: TerminalSpec::Gaussian { mean: 2.5, variance: 1.0 },
            xi_dist: InitialDist::Deterministic(5.0),
            ..params
        };
        let dec = LeaderDecoupling::solve(&shifted, &sol, &Tolerances::default()).unwrap();
        assert_eq!(*dec.psi.last(), Vec3::new(2.5, 0.0, 0.0));
    }

    #[test]
    fn psi_is_affine_in_leader_mean() {
        let (params, sol) = reference(500);
        let grid = *sol.pi.grid();
        let flow = solve_phi_flow(&params, &sol.pi, &grid, 1e12).unwrap();
        let psi = |m| solve_psi(&params, &sol.pi, &flow.phi, &grid, m).unwrap();
        let (p0, p1, p2) = (psi(0.0), psi(1.0), psi(2.0));
        for k in 0..=grid.steps() {
            let predicted = p0.node(k) + (p1.node(k) - p0.node(k)) * 2.0;
            assert!((p2.node(k) - predicted).amax() < 1e-10);
        }
    }

    #[test]
    fn phi_is_not_symmetric_on_reference_set() {
        let (params, sol) = reference(500);
        let dec = LeaderDecoupling::solve(&params, &sol, &Tolerances::default()).unwrap();
        assert!(dec.asymmetry() > 1e-3);
        assert!(dec.max_beta_condition().is_finite());
    }
}
