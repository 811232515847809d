//! Monte Carlo simulation of the leader and `N` followers under the
//! decentralized strategies.
//!
//! The leader's realized state is the limit state `x0`; its control is the
//! decentralized `u0` evaluated along the limit path. Each follower is stepped
//! by Euler-Maruyama on its closed-loop dynamics driven by its own noise, and
//! the empirical average of the followers is compared to the limit mean field.
//!
//! Paths are independent work items run in parallel; every cross-path
//! reduction runs sequentially in path order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::config::{validate, ModelParams, Population, SimConfig, Tolerances};
use crate::decoupling::LeaderDecoupling;
use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};
use crate::limit::{LimitPath, LimitSystem, Vec3};
use crate::noise::{derive_seed, draw_noise, AgentStream, NoiseBundle};
use crate::riccati::{FollowerRiccati, BLOW_UP_LIMIT};
use crate::strategy::{open_loop_drift, Strategies};

/// Limit Riccati solution, leader decoupling and strategies on one grid.
#[derive(Debug, Clone)]
pub struct DecentralizedSolution {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub riccati: FollowerRiccati,
    pub decoupling: LeaderDecoupling,
    pub limit: LimitSystem,
    pub strategies: Strategies,
}

impl DecentralizedSolution {
    pub fn solve(params: &ModelParams, grid: &TimeGrid, tolerances: &Tolerances) -> Result<Self> {
        validate(params, Population::Limit).into_result()?;
        let riccati = FollowerRiccati::solve(params, grid, Population::Limit)?;
        check_identity(&riccati, tolerances.riccati_residual_tol)?;
        let decoupling = LeaderDecoupling::solve(params, &riccati, tolerances)?;
        let limit = LimitSystem::new(params, &decoupling, tolerances.fixed_point_denominator_min)?;
        let strategies = Strategies::new(params, &riccati);
        Ok(Self {
            params: params.clone(),
            grid: *grid,
            riccati,
            decoupling,
            limit,
            strategies,
        })
    }
}

/// Fails when `sup |Pi - (P + K)|` exceeds `tol`.
pub fn check_identity(riccati: &FollowerRiccati, tol: f64) -> Result<()> {
    let defect = riccati.identity_defect();
    if defect <= tol {
        Ok(())
    } else {
        Err(Error::IdentityViolated(format!(
            "sup |Pi - (P + K)| = {defect:e} exceeds {tol:e}"
        )))
    }
}

/// Mean with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and `s / sqrt(n)`, summed in slice order.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

/// Which follower paths to keep after costs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    Summary,
    Full,
}

/// One simulated path with its per-path statistics.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub limit: LimitPath,
    pub u0: Vec<f64>,
    /// Empirical follower average at each node.
    pub mean_field: Vec<f64>,
    /// Follower states, `N` rows of `M + 1`, kept only with [`Retention::Full`].
    pub followers: Option<Vec<f64>>,
    pub leader_cost: f64,
    /// Follower cost averaged over the population.
    pub follower_cost: f64,
    /// `int_0^T (x^(N) - xbar)^2 dt`.
    pub deviation: f64,
    pub follower_residual_sup: f64,
    pub leader_residual_sup: f64,
}

impl PathRecord {
    pub fn leader_states(&self) -> Vec<f64> {
        self.limit.x.iter().map(|x| x[0]).collect()
    }

    pub fn limit_mean_field(&self) -> Vec<f64> {
        self.limit.y.iter().map(|y| y[1]).collect()
    }

    pub fn follower(&self, i: usize) -> Option<&[f64]> {
        let nodes = self.u0.len();
        self.followers.as_ref().map(|f| &f[i * nodes..(i + 1) * nodes])
    }
}

#[derive(Debug, Clone)]
pub struct PopulationEnsemble {
    pub population: usize,
    pub grid: TimeGrid,
    pub paths: Vec<PathRecord>,
}

/// One row of a perturbation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRecord {
    pub target: String,
    pub direction: usize,
    pub delta: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub population: usize,
    pub n_paths: usize,
    pub j0: Estimate,
    pub ji_mean: Estimate,
    pub epsilon: Estimate,
    pub follower_residual_sup: f64,
    pub leader_residual_sup: f64,
    pub gaps: Vec<GapRecord>,
}

impl CostReport {
    pub fn stationarity_sup(&self) -> f64 {
        self.follower_residual_sup.max(self.leader_residual_sup)
    }
}

/// Trapezoidal rule over node values produced on demand.
fn integrate(grid: &TimeGrid, f: impl Fn(usize) -> f64) -> f64 {
    let m = grid.steps();
    let interior: f64 = (1..m).map(&f).sum();
    grid.step() * (interior + 0.5 * (f(0) + f(m)))
}

fn check_len(grid: &TimeGrid, series: &[&[f64]]) -> Result<()> {
    if series.iter().all(|s| s.len() == grid.nodes()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "cost inputs need {} node values each",
            grid.nodes()
        )))
    }
}

/// `1/2 [ int Q0 (x0 - Gamma0 x^(N) - eta0)^2 + R0 u0^2 dt + H0 x0(0)^2 ]` on one path.
pub fn leader_path_cost(p: &ModelParams, grid: &TimeGrid, x0: &[f64], mean_field: &[f64], u0: &[f64]) -> Result<f64> {
    check_len(grid, &[x0, mean_field, u0])?;
    Ok(leader_cost_raw(p, grid, x0, mean_field, u0))
}

fn leader_cost_raw(p: &ModelParams, grid: &TimeGrid, x0: &[f64], mean_field: &[f64], u0: &[f64]) -> f64 {
    let running = integrate(grid, |k| {
        let e = x0[k] - p.Gamma0 * mean_field[k] - p.eta0;
        p.Q0 * e * e + p.R0 * u0[k] * u0[k]
    });
    0.5 * (running + p.H0 * x0[0] * x0[0])
}

/// `1/2 [ int Q (x - Gamma x^(N) - Gamma1 x0 - eta)^2 + R u^2 + 2 u L u0 dt + H x(T)^2 ]` on one path.
pub fn follower_path_cost(
    p: &ModelParams,
    grid: &TimeGrid,
    x: &[f64],
    mean_field: &[f64],
    x0: &[f64],
    u: &[f64],
    u0: &[f64],
) -> Result<f64> {
    check_len(grid, &[x, mean_field, x0, u, u0])?;
    Ok(follower_cost_raw(p, grid, x, mean_field, x0, u, u0))
}

fn follower_cost_raw(
    p: &ModelParams,
    grid: &TimeGrid,
    x: &[f64],
    mean_field: &[f64],
    x0: &[f64],
    u: &[f64],
    u0: &[f64],
) -> f64 {
    let running = integrate(grid, |k| {
        let e = x[k] - p.Gamma * mean_field[k] - p.Gamma1 * x0[k] - p.eta;
        p.Q * e * e + p.R * u[k] * u[k] + 2.0 * u[k] * p.L * u0[k]
    });
    let last = x[x.len() - 1];
    0.5 * (running + p.H * last * last)
}

fn guard(value: f64, equation: &'static str, node: usize) -> Result<()> {
    if value.is_finite() && value.abs() <= BLOW_UP_LIMIT {
        Ok(())
    } else {
        Err(Error::BlowUp { equation, node })
    }
}

/// Leader-side processes seen by the followers.
struct Environment {
    x0: Vec<f64>,
    xbar: Vec<f64>,
    phibar: Vec<f64>,
    u0: Vec<f64>,
}

impl Environment {
    fn from_limit(sol: &DecentralizedSolution, limit: &LimitPath) -> Self {
        let u0 = limit
            .y
            .iter()
            .zip(&limit.x)
            .enumerate()
            .map(|(k, (y, x))| sol.strategies.leader_control_at(k, y[0], x[1], y[2]))
            .collect();
        Self {
            x0: limit.x.iter().map(|x| x[0]).collect(),
            xbar: limit.y.iter().map(|y| y[1]).collect(),
            phibar: limit.x.iter().map(|x| x[2]).collect(),
            u0,
        }
    }

    /// Shift by `delta` times a leader deviation and its induced corrections.
    fn shifted(&self, correction: &LeaderCorrection, delta: f64) -> Self {
        let add = |base: &[f64], d: &[f64]| base.iter().zip(d).map(|(b, d)| b + delta * d).collect();
        Self {
            x0: add(&self.x0, &correction.x0),
            xbar: add(&self.xbar, &correction.xbar),
            phibar: add(&self.phibar, &correction.phibar),
            u0: add(&self.u0, &correction.u0),
        }
    }
}

/// Closed-loop followers, `N` rows of `M + 1` nodes.
fn simulate_followers(sol: &DecentralizedSolution, env: &Environment, noise: &NoiseBundle) -> Result<Vec<f64>> {
    let grid = &sol.grid;
    let m = grid.steps();
    let h = grid.step();
    let d = sol.params.D;
    let n = noise.population();
    let mut states = Vec::with_capacity(n * (m + 1));
    for i in 0..n {
        let dw = noise.follower(i);
        let mut x = noise.xi[i];
        states.push(x);
        for k in 0..m {
            let drift = sol
                .strategies
                .follower_drift_at(k, x, env.xbar[k], env.phibar[k], env.x0[k], env.u0[k]);
            x += drift * h + d * dw[k];
            guard(x, "follower state", k + 1)?;
            states.push(x);
        }
    }
    Ok(states)
}

/// Node-wise follower average, accumulated in follower order.
fn average(states: &[f64], n: usize, nodes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; nodes];
    for row in states.chunks_exact(nodes).take(n) {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
    }
    sum.iter().map(|s| s / n as f64).collect()
}

fn follower_controls(sol: &DecentralizedSolution, env: &Environment, x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(k, &xk)| {
            sol.strategies
                .follower_control_at(k, xk, env.xbar[k], env.phibar[k], env.u0[k])
        })
        .collect()
}

/// Follower states under one environment and their average.
struct FollowerRun {
    states: Vec<f64>,
    mean_field: Vec<f64>,
}

fn run_population(sol: &DecentralizedSolution, env: &Environment, noise: &NoiseBundle) -> Result<FollowerRun> {
    let states = simulate_followers(sol, env, noise)?;
    let mean_field = average(&states, noise.population(), sol.grid.nodes());
    Ok(FollowerRun { states, mean_field })
}

fn simulate_path(sol: &DecentralizedSolution, noise: &NoiseBundle, retention: Retention) -> Result<PathRecord> {
    let grid = &sol.grid;
    let p = &sol.params;
    let nodes = grid.nodes();
    let n = noise.population();
    let limit = sol.limit.simulate_path(&noise.w0)?;
    let env = Environment::from_limit(sol, &limit);
    let pop = run_population(sol, &env, noise)?;

    let mut leader_residual_sup = 0.0_f64;
    for k in 0..nodes {
        let y = Vec3::new(limit.y[k][0], limit.x[k][1], limit.y[k][2]);
        let r = sol.strategies.stationarity_residual_leader_at(k, &y, env.u0[k]);
        leader_residual_sup = leader_residual_sup.max(r.abs());
    }

    let mut follower_residual_sup = 0.0_f64;
    let mut follower_total = 0.0;
    for row in pop.states.chunks_exact(nodes) {
        let u = follower_controls(sol, &env, row);
        for k in 0..nodes {
            let r = sol.strategies.stationarity_residual_follower_at(
                k,
                row[k],
                env.xbar[k],
                env.phibar[k],
                u[k],
                env.u0[k],
            );
            follower_residual_sup = follower_residual_sup.max(r.abs());
        }
        follower_total += follower_cost_raw(p, grid, row, &pop.mean_field, &env.x0, &u, &env.u0);
    }

    let leader_cost = leader_cost_raw(p, grid, &env.x0, &pop.mean_field, &env.u0);
    let deviation = integrate(grid, |k| {
        let e = pop.mean_field[k] - env.xbar[k];
        e * e
    });
    Ok(PathRecord {
        limit,
        u0: env.u0,
        mean_field: pop.mean_field,
        followers: match retention {
            Retention::Full => Some(pop.states),
            Retention::Summary => None,
        },
        leader_cost,
        follower_cost: follower_total / n as f64,
        deviation,
        follower_residual_sup,
        leader_residual_sup,
    })
}

fn check_setup(sol: &DecentralizedSolution, config: &SimConfig, population: usize) -> Result<()> {
    if config.grid != sol.grid {
        return Err(Error::InvalidArgument("simulation grid differs from the solution grid".into()));
    }
    if population == 0 || config.n_paths == 0 {
        return Err(Error::InvalidArgument("population and path count must be positive".into()));
    }
    if population >= 1 << 31 || config.n_paths > u32::MAX as usize {
        return Err(Error::InvalidArgument("population or path count too large".into()));
    }
    validate(&sol.params, Population::Finite(population)).into_result()
}

/// `epsilon = sqrt(mean deviation)` with a delta-method standard error.
pub fn epsilon_estimate(deviations: &[f64]) -> Estimate {
    let d = Estimate::from_samples(deviations);
    let eps = d.mean.max(0.0).sqrt();
    let stderr = if eps > 0.0 { d.stderr / (2.0 * eps) } else { 0.0 };
    Estimate { mean: eps, stderr }
}

pub fn simulate_ensemble(
    sol: &DecentralizedSolution,
    config: &SimConfig,
    population: usize,
    retention: Retention,
) -> Result<(PopulationEnsemble, CostReport)> {
    check_setup(sol, config, population)?;
    let paths: Vec<PathRecord> = (0..config.n_paths)
        .into_par_iter()
        .map(|path| {
            let noise = draw_noise(&sol.params, &sol.grid, config.seed, population, path as u32);
            simulate_path(sol, &noise, retention)
        })
        .collect::<Result<_>>()?;

    let collect = |f: fn(&PathRecord) -> f64| paths.iter().map(f).collect::<Vec<_>>();
    let report = CostReport {
        population,
        n_paths: paths.len(),
        j0: Estimate::from_samples(&collect(|r| r.leader_cost)),
        ji_mean: Estimate::from_samples(&collect(|r| r.follower_cost)),
        epsilon: epsilon_estimate(&collect(|r| r.deviation)),
        follower_residual_sup: collect(|r| r.follower_residual_sup).into_iter().fold(0.0, f64::max),
        leader_residual_sup: collect(|r| r.leader_residual_sup).into_iter().fold(0.0, f64::max),
        gaps: Vec::new(),
    };
    Ok((
        PopulationEnsemble {
            population,
            grid: sol.grid,
            paths,
        },
        report,
    ))
}

/// Leader cost recomputed from the stored paths.
pub fn cost_leader(sol: &DecentralizedSolution, ensemble: &PopulationEnsemble) -> Result<Estimate> {
    let costs = ensemble
        .paths
        .iter()
        .map(|r| leader_path_cost(&sol.params, &ensemble.grid, &r.leader_states(), &r.mean_field, &r.u0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&costs))
}

/// Cost of follower `i` (zero-based); needs an ensemble kept with [`Retention::Full`].
pub fn cost_follower(sol: &DecentralizedSolution, ensemble: &PopulationEnsemble, i: usize) -> Result<Estimate> {
    if i >= ensemble.population {
        return Err(Error::InvalidArgument(format!(
            "follower {i} out of range for N = {}",
            ensemble.population
        )));
    }
    let costs = ensemble
        .paths
        .iter()
        .map(|r| {
            let x = r
                .follower(i)
                .ok_or_else(|| Error::InvalidArgument("follower paths were not retained".into()))?;
            let env = Environment::from_limit(sol, &r.limit);
            let u = follower_controls(sol, &env, x);
            follower_path_cost(&sol.params, &ensemble.grid, x, &r.mean_field, &env.x0, &u, &env.u0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&costs))
}

/// Whose control is perturbed.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationTarget {
    /// The leader deviates; followers keep their feedback and react to it.
    Leader,
    /// Follower `i` (zero-based) deviates open-loop from its baseline control.
    Follower(usize),
    /// As [`PerturbationTarget::Follower`], with the leader playing the
    /// decentralized control plus a fixed bounded offset instead.
    FollowerAgainstOffset { follower: usize, leader_offset: Vec<f64> },
}

impl PerturbationTarget {
    pub fn label(&self) -> String {
        match self {
            PerturbationTarget::Leader => "leader".into(),
            PerturbationTarget::Follower(i) => format!("follower{}", i + 1),
            PerturbationTarget::FollowerAgainstOffset { follower, .. } => {
                format!("follower{}_leader_offset", follower + 1)
            }
        }
    }
}

/// A bounded direction `v`, applied as `control + delta * v` with `v` read at
/// the left node of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub target: PerturbationTarget,
    pub direction_id: usize,
    pub direction: Trajectory<f64>,
    pub magnitudes: Vec<f64>,
}

pub const DIRECTION_BOUND: f64 = 10.0;

impl PerturbationSpec {
    fn check(&self, grid: &TimeGrid, population: usize) -> Result<()> {
        if self.direction.grid() != grid {
            return Err(Error::InvalidArgument("direction is stored on a different grid".into()));
        }
        let sup = self.direction.values().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !(sup <= DIRECTION_BOUND) {
            return Err(Error::InvalidArgument(format!(
                "direction sup norm {sup} exceeds {DIRECTION_BOUND}"
            )));
        }
        let follower = match &self.target {
            PerturbationTarget::Leader => None,
            PerturbationTarget::Follower(i) => Some(*i),
            PerturbationTarget::FollowerAgainstOffset { follower, leader_offset } => {
                if leader_offset.len() != grid.nodes() {
                    return Err(Error::InvalidArgument("leader offset needs one value per node".into()));
                }
                Some(*follower)
            }
        };
        match follower {
            Some(i) if i >= population => Err(Error::InvalidArgument(format!(
                "follower {} out of range for N = {population}",
                i + 1
            ))),
            _ => Ok(()),
        }
    }
}

/// First-order response of the leader-side processes to a leader deviation `w`:
/// `x0` backward from 0 at `T`, `phi` backward from 0 at `T`, `xbar` forward
/// from 0 at 0, all by explicit Euler on the grid.
#[derive(Debug, Clone)]
struct LeaderCorrection {
    x0: Vec<f64>,
    xbar: Vec<f64>,
    phibar: Vec<f64>,
    u0: Vec<f64>,
}

impl LeaderCorrection {
    fn new(sol: &DecentralizedSolution, w: &[f64]) -> Self {
        let p = &sol.params;
        let m = sol.grid.steps();
        let h = sol.grid.step();
        let s = p.control_gain();
        let g = p.leader_coupling();
        let pi = sol.riccati.pi.values();

        let mut x0 = vec![0.0; m + 1];
        let mut phibar = vec![0.0; m + 1];
        for k in (0..m).rev() {
            x0[k] = x0[k + 1] - h * (p.A0 * x0[k + 1] + p.B0 * w[k]);
            let pik = pi[k + 1];
            phibar[k] = phibar[k + 1]
                + h * ((p.A - pik * s) * phibar[k + 1] + pik * g * w[k] + (pik * p.F - p.Q * p.Gamma1) * x0[k + 1]);
        }
        let mut xbar = vec![0.0; m + 1];
        for k in 0..m {
            xbar[k + 1] = xbar[k] + h * ((p.A - s * pi[k]) * xbar[k] - s * phibar[k] + p.F * x0[k] + g * w[k]);
        }
        Self {
            x0,
            xbar,
            phibar,
            u0: w.to_vec(),
        }
    }
}

/// Open-loop replay of follower `i` with control `u` against `env`; returns the
/// follower's cost with the population average adjusted for its new path.
fn replay_follower_cost(
    sol: &DecentralizedSolution,
    env: &Environment,
    noise: &NoiseBundle,
    pop: &FollowerRun,
    i: usize,
    u: &[f64],
) -> Result<f64> {
    let grid = &sol.grid;
    let nodes = grid.nodes();
    let h = grid.step();
    let n = noise.population() as f64;
    let base = &pop.states[i * nodes..(i + 1) * nodes];
    let dw = noise.follower(i);
    let mut x = vec![noise.xi[i]; nodes];
    for k in 0..grid.steps() {
        let drift = open_loop_drift(&sol.params, x[k], u[k], env.x0[k], env.u0[k]);
        x[k + 1] = x[k] + drift * h + sol.params.D * dw[k];
        guard(x[k + 1], "perturbed follower state", k + 1)?;
    }
    let mean_field: Vec<f64> = (0..nodes).map(|k| pop.mean_field[k] + (x[k] - base[k]) / n).collect();
    Ok(follower_cost_raw(&sol.params, grid, &x, &mean_field, &env.x0, u, &env.u0))
}

/// Cost differences `J(delta) - J(0)` of every (spec, delta) pair on one path.
fn path_gaps(
    sol: &DecentralizedSolution,
    specs: &[PerturbationSpec],
    corrections: &[Option<LeaderCorrection>],
    noise: &NoiseBundle,
) -> Result<Vec<f64>> {
    let limit = sol.limit.simulate_path(&noise.w0)?;
    let base_env = Environment::from_limit(sol, &limit);
    let base_pop = run_population(sol, &base_env, noise)?;
    let nodes = sol.grid.nodes();

    let mut out = Vec::new();
    for (spec, correction) in specs.iter().zip(corrections) {
        let v = spec.direction.values();
        match &spec.target {
            PerturbationTarget::Leader => {
                let corr = correction.as_ref().expect("leader targets carry a correction");
                let cost = |delta: f64| -> Result<f64> {
                    let env = base_env.shifted(corr, delta);
                    let pop = run_population(sol, &env, noise)?;
                    Ok(leader_cost_raw(&sol.params, &sol.grid, &env.x0, &pop.mean_field, &env.u0))
                };
                let reference = cost(0.0)?;
                for &delta in &spec.magnitudes {
                    out.push(cost(delta)? - reference);
                }
            }
            PerturbationTarget::Follower(i) | PerturbationTarget::FollowerAgainstOffset { follower: i, .. } => {
                let shifted;
                let (env, pop) = match correction {
                    Some(corr) => {
                        let env = base_env.shifted(corr, 1.0);
                        let pop = run_population(sol, &env, noise)?;
                        shifted = (env, pop);
                        (&shifted.0, &shifted.1)
                    }
                    None => (&base_env, &base_pop),
                };
                let row = &pop.states[i * nodes..(i + 1) * nodes];
                let u_base = follower_controls(sol, env, row);
                let cost = |delta: f64| -> Result<f64> {
                    let u: Vec<f64> = u_base.iter().zip(v).map(|(u, v)| u + delta * v).collect();
                    replay_follower_cost(sol, env, noise, pop, *i, &u)
                };
                let reference = cost(0.0)?;
                for &delta in &spec.magnitudes {
                    out.push(cost(delta)? - reference);
                }
            }
        }
    }
    Ok(out)
}

/// Mean cost change of each target under `control + delta * direction`, with
/// the same noise for the perturbed and unperturbed runs.
pub fn perturbation_gap(
    sol: &DecentralizedSolution,
    config: &SimConfig,
    population: usize,
    specs: &[PerturbationSpec],
) -> Result<Vec<GapRecord>> {
    check_setup(sol, config, population)?;
    for spec in specs {
        spec.check(&sol.grid, population)?;
    }
    let corrections: Vec<Option<LeaderCorrection>> = specs
        .iter()
        .map(|spec| match &spec.target {
            PerturbationTarget::Leader => Some(LeaderCorrection::new(sol, spec.direction.values())),
            PerturbationTarget::FollowerAgainstOffset { leader_offset, .. } => {
                Some(LeaderCorrection::new(sol, leader_offset))
            }
            PerturbationTarget::Follower(_) => None,
        })
        .collect();

    let per_path: Vec<Vec<f64>> = (0..config.n_paths)
        .into_par_iter()
        .map(|path| {
            let noise = draw_noise(&sol.params, &sol.grid, config.seed, population, path as u32);
            path_gaps(sol, specs, &corrections, &noise)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut column = 0;
    for spec in specs {
        for &delta in &spec.magnitudes {
            let sum: f64 = per_path.iter().map(|g| g[column]).sum();
            records.push(GapRecord {
                target: spec.target.label(),
                direction: spec.direction_id,
                delta,
                gap: sum / per_path.len() as f64,
            });
            column += 1;
        }
    }
    Ok(records)
}

/// Path index reserved for direction streams.
const DIRECTION_PATH: u32 = u32::MAX;

/// `count` piecewise-constant directions with `segments` equal pieces and
/// values uniform in `[-1, 1]`.
pub fn random_directions(seed: u64, count: usize, grid: &TimeGrid, segments: usize) -> Result<Vec<Trajectory<f64>>> {
    if segments == 0 {
        return Err(Error::InvalidArgument("a direction needs at least one segment".into()));
    }
    let m = grid.steps();
    (0..count)
        .map(|d| {
            let mut stream = AgentStream::new(seed, DIRECTION_PATH, d as u32);
            let levels: Vec<f64> = (0..segments).map(|_| 2.0 * stream.uniform() - 1.0).collect();
            let values = (0..=m).map(|k| levels[(k * segments / m).min(segments - 1)]).collect();
            Trajectory::from_values(*grid, values)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonRow {
    pub population: usize,
    pub epsilon: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<EpsilonRow>,
    /// Least-squares slope of `log epsilon` against `log N`, when defined.
    pub slope: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than two
/// distinct abscissae or a non-positive ordinate.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// `epsilon(N)` for every population size, each with its own derived seed.
pub fn epsilon_sweep(sol: &DecentralizedSolution, config: &SimConfig, populations: &[usize]) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(populations.len());
    for &n in populations {
        let run = SimConfig {
            seed: derive_seed(config.seed, n),
            ..config.clone()
        };
        let (_, report) = simulate_ensemble(sol, &run, n, Retention::Summary)?;
        rows.push(EpsilonRow {
            population: n,
            epsilon: report.epsilon.mean,
            stderr: report.epsilon.stderr,
            n_paths: report.n_paths,
        });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.population as f64, r.epsilon)).collect();
    Ok(SweepResult {
        slope: log_log_slope(&points),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InitialDist;

    #[test]
    fn estimate_of_constant_samples() {
        let e = Estimate::from_samples(&[2.0, 2.0, 2.0]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(Estimate::from_samples(&[4.0]).stderr, 0.0);
    }

    #[test]
    fn leader_cost_examples() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(5.0, 100).unwrap();
        let zeros = vec![0.0; grid.nodes()];
        let ones = vec![1.0; grid.nodes()];
        let p0 = ModelParams { eta0: 0.0, ..p.clone() };
        assert_eq!(leader_path_cost(&p0, &grid, &zeros, &zeros, &zeros).unwrap(), 0.0);
        let c = leader_path_cost(&p0, &grid, &ones, &zeros, &zeros).unwrap();
        assert!((c - 2.5).abs() < 1e-12);
        // H0 = 0 in the reference set: the initial term drops out
        let big = {
            let mut x = ones.clone();
            x[0] = 100.0;
            x
        };
        let with_h0 = ModelParams { H0: 1.0, ..p0.clone() };
        let a = leader_path_cost(&p0, &grid, &big, &zeros, &zeros).unwrap();
        let b = leader_path_cost(&with_h0, &grid, &big, &zeros, &zeros).unwrap();
        assert!((b - a - 0.5 * 100.0 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn follower_cost_examples() {
        let p = ModelParams {
            eta: 0.0,
            H: 0.0,
            ..ModelParams::default()
        };
        let grid = TimeGrid::new(5.0, 100).unwrap();
        let zeros = vec![0.0; grid.nodes()];
        let ones = vec![1.0; grid.nodes()];
        assert_eq!(follower_path_cost(&p, &grid, &zeros, &zeros, &zeros, &zeros, &zeros).unwrap(), 0.0);
        let c = follower_path_cost(&p, &grid, &zeros, &zeros, &zeros, &ones, &ones).unwrap();
        assert!((c - 7.5).abs() < 1e-12);

        let u: Vec<f64> = grid.times().map(|t| (t * 0.7).sin()).collect();
        let u0: Vec<f64> = grid.times().map(|t| 1.0 + t).collect();
        let neg: Vec<f64> = u0.iter().map(|v| -v).collect();
        let x: Vec<f64> = grid.times().map(|t| 0.3 * t).collect();
        let plus = follower_path_cost(&p, &grid, &x, &zeros, &zeros, &u, &u0).unwrap();
        let minus = follower_path_cost(&p, &grid, &x, &zeros, &zeros, &u, &neg).unwrap();
        let cross = grid.trapezoid(&u.iter().zip(&u0).map(|(a, b)| a * b).collect::<Vec<_>>());
        assert!((plus - minus - 2.0 * p.L * cross).abs() < 1e-12);
    }

    #[test]
    fn cost_inputs_are_length_checked() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(5.0, 10).unwrap();
        assert!(leader_path_cost(&p, &grid, &[0.0; 3], &[0.0; 11], &[0.0; 11]).is_err());
    }

    #[test]
    fn slope_needs_two_points() {
        assert_eq!(log_log_slope(&[(25.0, 0.3)]), None);
        assert_eq!(log_log_slope(&[(25.0, 0.3), (25.0, 0.2)]), None);
        let s = log_log_slope(&[(1.0, 1.0), (4.0, 0.5), (16.0, 0.25)]).unwrap();
        assert!((s + 0.5).abs() < 1e-12);
    }

    #[test]
    fn directions_are_bounded_and_piecewise_constant() {
        let grid = TimeGrid::new(5.0, 100).unwrap();
        let dirs = random_directions(9, 3, &grid, 10).unwrap();
        assert_eq!(dirs, random_directions(9, 3, &grid, 10).unwrap());
        for d in &dirs {
            assert!(d.values().iter().all(|v| v.abs() <= 1.0));
            let distinct = d.values().windows(2).filter(|w| w[0] != w[1]).count();
            assert!(distinct <= 9);
        }
        assert_ne!(dirs[0], dirs[1]);
    }

    fn small(params: ModelParams, steps: usize, paths: usize) -> (DecentralizedSolution, SimConfig) {
        let config = SimConfig {
            n_paths: paths,
            ..SimConfig::for_params(&params).unwrap().with_steps(steps).unwrap()
        };
        let sol = DecentralizedSolution::solve(&params, &config.grid, &config.tolerances).unwrap();
        (sol, config)
    }

    #[test]
    fn stored_average_matches_followers() {
        let (sol, config) = small(ModelParams::default(), 200, 4);
        let (ens, _) = simulate_ensemble(&sol, &config, 7, Retention::Full).unwrap();
        for r in &ens.paths {
            let nodes = config.grid.nodes();
            for k in 0..nodes {
                let s: f64 = (0..7).map(|i| r.follower(i).unwrap()[k]).sum::<f64>() / 7.0;
                assert!((s - r.mean_field[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relabelling_followers_permutes_their_paths() {
        let (sol, _) = small(ModelParams::default(), 100, 1);
        let noise = draw_noise(&sol.params, &sol.grid, 4, 5, 0);
        let order = [3, 0, 4, 1, 2];
        let a = simulate_path(&sol, &noise, Retention::Full).unwrap();
        let b = simulate_path(&sol, &noise.permuted(&order), Retention::Full).unwrap();
        for (i, &j) in order.iter().enumerate() {
            assert_eq!(b.follower(i), a.follower(j));
        }
        for k in 0..sol.grid.nodes() {
            assert!((a.mean_field[k] - b.mean_field[k]).abs() < 1e-12);
        }
        assert!((a.deviation - b.deviation).abs() < 1e-12);
        assert!((a.leader_cost - b.leader_cost).abs() < 1e-9);
    }

    #[test]
    fn recomputed_costs_match_report() {
        let (sol, config) = small(ModelParams::default(), 200, 5);
        let (ens, report) = simulate_ensemble(&sol, &config, 6, Retention::Full).unwrap();
        assert_eq!(cost_leader(&sol, &ens).unwrap(), report.j0);
        let mean_of_followers: f64 = (0..6).map(|i| cost_follower(&sol, &ens, i).unwrap().mean).sum::<f64>() / 6.0;
        assert!((mean_of_followers - report.ji_mean.mean).abs() < 1e-10);
        let (summary, _) = simulate_ensemble(&sol, &config, 6, Retention::Summary).unwrap();
        assert!(cost_follower(&sol, &summary, 0).is_err());
    }

    #[test]
    fn noiseless_identical_followers_track_the_limit() {
        let params = ModelParams {
            D: 0.0,
            xi_dist: InitialDist::Deterministic(5.0),
            ..ModelParams::default()
        };
        let (sol, config) = small(params, 500, 3);
        let (_, report) = simulate_ensemble(&sol, &config, 10, Retention::Summary).unwrap();
        assert!(report.epsilon.mean <= 10.0 * config.grid.step());
    }

    #[test]
    fn zero_delta_gives_zero_gap() {
        let (sol, config) = small(ModelParams::default(), 100, 3);
        let dirs = random_directions(1, 1, &config.grid, 5).unwrap();
        let offset = vec![0.5; config.grid.nodes()];
        let specs: Vec<PerturbationSpec> = [
            PerturbationTarget::Leader,
            PerturbationTarget::Follower(0),
            PerturbationTarget::FollowerAgainstOffset {
                follower: 2,
                leader_offset: offset,
            },
        ]
        .into_iter()
        .map(|target| PerturbationSpec {
            target,
            direction_id: 0,
            direction: dirs[0].clone(),
            magnitudes: vec![0.0, 0.5],
        })
        .collect();
        let gaps = perturbation_gap(&sol, &config, 4, &specs).unwrap();
        assert_eq!(gaps.len(), 6);
        for g in gaps.iter().filter(|g| g.delta == 0.0) {
            assert_eq!(g.gap, 0.0);
        }
        assert_eq!(gaps[2].target, "follower1");
    }

    #[test]
    fn perturbation_specs_are_checked() {
        let (sol, config) = small(ModelParams::default(), 100, 2);
        let grid = config.grid;
        let big = Trajectory::from_values(grid, vec![11.0; grid.nodes()]).unwrap();
        let spec = PerturbationSpec {
            target: PerturbationTarget::Leader,
            direction_id: 0,
            direction: big,
            magnitudes: vec![0.1],
        };
        assert!(perturbation_gap(&sol, &config, 3, &[spec]).is_err());
        let spec = PerturbationSpec {
            target: PerturbationTarget::Follower(3),
            direction_id: 0,
            direction: random_directions(0, 1, &grid, 3).unwrap().remove(0),
            magnitudes: vec![0.1],
        };
        assert!(perturbation_gap(&sol, &config, 3, &[spec]).is_err());
    }
}
